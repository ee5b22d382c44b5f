use crate::error::{Error, Result};
use crate::numeric::linalg::has_full_column_rank;
use crate::numeric::{xavier_uniform, Graph, NormMode, NormStats, ParamSet, Rng, Tensor, Var};
use crate::pwtp::{config::PwtpConfig, forward};

/// Attempts at drawing an initialization whose bases all have full column rank.
pub const INIT_ATTEMPTS: usize = 5;

const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Dense {
    fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Bottleneck block: normalization, reducing FC, restoring FC, residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub down: Dense,
    pub up: Dense,
}

impl Bottleneck {
    pub fn running_stats(&self) -> NormStats {
        NormStats {
            mean: self.running_mean.data().to_vec(),
            var: self.running_var.data().to_vec(),
        }
    }
}

/// Projector parameters: aggregation kernel and basis-generating MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PwtpParams {
    /// `[k, k, C, C']`
    pub conv: Tensor,
    pub expand: Dense,
    pub blocks: Vec<Bottleneck>,
    pub out: Dense,
}

/// Graph handles mirroring [`PwtpParams`].
#[derive(Clone, Debug)]
pub struct PwtpVars {
    pub conv: Var,
    pub expand: (Var, Var),
    pub blocks: Vec<BlockVars>,
    pub out: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub gamma: Var,
    pub beta: Var,
    pub down: (Var, Var),
    pub up: (Var, Var),
}

impl PwtpVars {
    /// Trainable handles, in [`PwtpParams::trainable`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = vec![self.conv, self.expand.0, self.expand.1];
        for b in &self.blocks {
            v.extend([b.gamma, b.beta, b.down.0, b.down.1, b.up.0, b.up.1]);
        }
        v.extend([self.out.0, self.out.1]);
        v
    }
}

/// Column-orthonormalized polynomial basis of `frames x rank`: column 0 is
/// constant, column 1 a ramp, and so on.
pub fn polynomial_basis(frames: usize, rank: usize) -> Vec<f64> {
    let center = (frames as f64 - 1.0) / 2.0;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for d in 0..rank {
        let mut c: Vec<f64> = (0..frames)
            .map(|t| (t as f64 - center).powi(d as i32))
            .collect();
        for prev in &cols {
            let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in c.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v /= norm);
        cols.push(c);
    }
    let mut out = vec![0.0; frames * rank];
    for t in 0..frames {
        for d in 0..rank {
            out[t * rank + d] = cols[d][t];
        }
    }
    out
}

impl PwtpParams {
    /// Draw a fresh initialization and verify that every per-pixel basis of a
    /// random probe clip has column rank D. Re-draws up to [`INIT_ATTEMPTS`] times.
    pub fn init(cfg: &PwtpConfig, in_channels: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        for _ in 0..INIT_ATTEMPTS {
            let params = Self::draw(cfg, in_channels, rng);
            if params.probe_full_rank(cfg, in_channels, rng)? {
                return Ok(params);
            }
        }
        Err(Error::RankDeficientInit {
            attempts: INIT_ATTEMPTS,
        })
    }

    fn draw(cfg: &PwtpConfig, in_channels: usize, rng: &mut Rng) -> Self {
        let k = cfg.kernel;
        let (p, hid, red, width) = (
            cfg.descriptor_len(),
            cfg.mlp.hidden(cfg.frames),
            cfg.mlp.reduced(cfg.frames),
            cfg.basis_width(),
        );
        let conv = xavier_uniform(
            rng,
            &[k, k, in_channels, cfg.channels],
            k * k * in_channels,
            k * k * cfg.channels,
        );
        let expand = Dense::xavier(rng, p, hid);
        let blocks = (0..cfg.mlp.blocks)
            .map(|_| Bottleneck {
                gamma: Tensor::full(&[hid], 1.0),
                beta: Tensor::zeros(&[hid]),
                running_mean: Tensor::zeros(&[hid]),
                running_var: Tensor::full(&[hid], 1.0),
                down: Dense::xavier(rng, hid, red),
                up: Dense::xavier(rng, red, hid),
            })
            .collect();
        let mut out = Dense::xavier(rng, hid, width);
        out.bias = Tensor::new(&[width], polynomial_basis(cfg.frames, cfg.rank)).unwrap();
        Self {
            conv,
            expand,
            blocks,
            out,
        }
    }

    fn probe_full_rank(&self, cfg: &PwtpConfig, in_channels: usize, rng: &mut Rng) -> Result<bool> {
        let extent = 2 * cfg.kernel.max(cfg.stride);
        let probe = Tensor::from_fn(&[1, cfg.frames, extent, extent, in_channels], |_| {
            rng.next_f64()
        });
        let bases = forward::bases_only(self, cfg, &probe, NormMode::Batch)?;
        let (t, d) = (cfg.frames, cfg.rank);
        Ok(bases
            .data()
            .chunks(t * d)
            .all(|a| has_full_column_rank(a, t, d, RANK_TOL)))
    }

    pub fn in_channels(&self) -> usize {
        self.conv.shape()[2]
    }

    fn trainable_refs(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("conv.weight".to_string(), &self.conv),
            ("mlp.expand.weight".to_string(), &self.expand.weight),
            ("mlp.expand.bias".to_string(), &self.expand.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("mlp.block{i}.norm.gamma"), &b.gamma));
            v.push((format!("mlp.block{i}.norm.beta"), &b.beta));
            v.push((format!("mlp.block{i}.down.weight"), &b.down.weight));
            v.push((format!("mlp.block{i}.down.bias"), &b.down.bias));
            v.push((format!("mlp.block{i}.up.weight"), &b.up.weight));
            v.push((format!("mlp.block{i}.up.bias"), &b.up.bias));
        }
        v.push(("mlp.out.weight".to_string(), &self.out.weight));
        v.push(("mlp.out.bias".to_string(), &self.out.bias));
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.conv,
            &mut self.expand.weight,
            &mut self.expand.bias,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.gamma,
                &mut b.beta,
                &mut b.down.weight,
                &mut b.down.bias,
                &mut b.up.weight,
                &mut b.up.bias,
            ]);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }

    /// Trainable tensors by name.
    pub fn trainable(&self) -> ParamSet {
        self.trainable_refs()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_refs().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replace the trainable tensors from a set produced by [`PwtpParams::trainable`].
    pub fn set_trainable(&mut self, set: &ParamSet) -> Result<()> {
        let names: Vec<String> = self.trainable_refs().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.trainable_mut()) {
            let t = set.require(name)?;
            slot.check_same_shape(t)?;
            *slot = t.clone();
        }
        Ok(())
    }

    /// Every tensor, including normalization running statistics.
    pub fn to_param_set(&self) -> ParamSet {
        let mut set = self.trainable();
        for (i, b) in self.blocks.iter().enumerate() {
            set.insert(
                format!("mlp.block{i}.norm.running_mean"),
                b.running_mean.clone(),
            )
            .unwrap();
            set.insert(
                format!("mlp.block{i}.norm.running_var"),
                b.running_var.clone(),
            )
            .unwrap();
        }
        set
    }

    /// Rebuild from [`PwtpParams::to_param_set`] output; shapes are taken from the tensors.
    pub fn from_param_set(set: &ParamSet) -> Result<Self> {
        let get = |n: &str| set.require(n).cloned();
        let dense = |prefix: &str| -> Result<Dense> {
            Ok(Dense {
                weight: get(&format!("{prefix}.weight"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        let mut blocks = Vec::new();
        while set
            .get(&format!("mlp.block{}.norm.gamma", blocks.len()))
            .is_some()
        {
            let i = blocks.len();
            blocks.push(Bottleneck {
                gamma: get(&format!("mlp.block{i}.norm.gamma"))?,
                beta: get(&format!("mlp.block{i}.norm.beta"))?,
                running_mean: get(&format!("mlp.block{i}.norm.running_mean"))?,
                running_var: get(&format!("mlp.block{i}.norm.running_var"))?,
                down: dense(&format!("mlp.block{i}.down"))?,
                up: dense(&format!("mlp.block{i}.up"))?,
            });
        }
        let params = Self {
            conv: get("conv.weight")?,
            expand: dense("mlp.expand")?,
            blocks,
            out: dense("mlp.out")?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::ShapeMismatch(format!(
                "projector parameters: {what}"
            )))
        };
        if self.conv.rank() != 4 || self.conv.shape()[0] != self.conv.shape()[1] {
            return bad("conv kernel must be [k, k, C, C']");
        }
        let hid = self.expand.weight.shape().get(1).copied().unwrap_or(0);
        if self.expand.bias.shape() != [hid] || self.out.weight.shape().first() != Some(&hid) {
            return bad("mlp widths disagree");
        }
        for b in &self.blocks {
            if b.gamma.shape() != [hid] || b.up.weight.shape().get(1) != Some(&hid) {
                return bad("bottleneck widths disagree");
            }
        }
        Ok(())
    }

    /// Check that the tensors match `cfg` and `in_channels`.
    pub fn check_config(&self, cfg: &PwtpConfig) -> Result<()> {
        let k = cfg.kernel;
        let expect = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "parameters do not match configuration: {what}"
                )))
            }
        };
        expect(
            self.conv.shape()[..2] == [k, k] && self.conv.shape()[3] == cfg.channels,
            "conv kernel",
        )?;
        expect(
            self.expand.weight.shape() == [cfg.descriptor_len(), cfg.mlp.hidden(cfg.frames)],
            "mlp input width",
        )?;
        expect(
            self.blocks.len() == cfg.mlp.blocks,
            "bottleneck block count",
        )?;
        expect(
            self.out.bias.shape() == [cfg.basis_width()],
            "mlp output width",
        )
    }

    /// Put the parameters on `g`; as trainable leaves when `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PwtpVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        PwtpVars {
            conv: leaf(&self.conv),
            expand: (leaf(&self.expand.weight), leaf(&self.expand.bias)),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    gamma: leaf(&b.gamma),
                    beta: leaf(&b.beta),
                    down: (leaf(&b.down.weight), leaf(&b.down.bias)),
                    up: (leaf(&b.up.weight), leaf(&b.up.bias)),
                })
                .collect(),
            out: (leaf(&self.out.weight), leaf(&self.out.bias)),
        }
    }

    /// Fold batch statistics into the running averages:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, stats: &[NormStats], momentum: f64) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            for (r, v) in b.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = momentum * *r + (1.0 - momentum) * v;
            }
            for (r, v) in b.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = momentum * *r + (1.0 - momentum) * v;
            }
        }
    }
}
