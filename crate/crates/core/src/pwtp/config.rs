use crate::error::{Error, Result};

/// Shape of the basis-generating MLP: an expanding FC, `blocks` bottleneck
/// blocks (norm, reduce by `bottleneck`, restore, residual add), then a final
/// FC to `T * D` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub expansion: usize,
    pub bottleneck: f64,
    pub blocks: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            expansion: 2,
            bottleneck: 0.25,
            blocks: 1,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion < 1 {
            return Err(Error::InvalidConfig("mlp expansion must be >= 1".into()));
        }
        if !(self.bottleneck > 0.0 && self.bottleneck <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mlp bottleneck ratio must be in (0, 1], got {}",
                self.bottleneck
            )));
        }
        Ok(())
    }

    pub fn in_features(&self, frames: usize) -> usize {
        frames * (frames - 1) / 2
    }

    pub fn hidden(&self, frames: usize) -> usize {
        self.expansion * self.in_features(frames)
    }

    pub fn reduced(&self, frames: usize) -> usize {
        ((self.hidden(frames) as f64 * self.bottleneck).round() as usize).max(1)
    }
}

/// Configuration of the temporal projector.
#[derive(Clone, Debug, PartialEq)]
pub struct PwtpConfig {
    /// Frames per segment (T).
    pub frames: usize,
    /// Subspace rank (D).
    pub rank: usize,
    /// Aggregation kernel size (k).
    pub kernel: usize,
    /// Aggregation stride (s).
    pub stride: usize,
    /// Aggregation output channels (C').
    pub channels: usize,
    pub mlp: MlpConfig,
    /// Added to the diagonal of every `AᵀA` before factorization.
    pub ridge: f64,
}

impl Default for PwtpConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            rank: 1,
            kernel: 9,
            stride: 8,
            channels: 24,
            mlp: MlpConfig::default(),
            ridge: 1e-6,
        }
    }
}

impl PwtpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidConfig("T must be at least 2".into()));
        }
        if self.rank < 1 || 2 * self.rank > self.frames {
            return Err(Error::InvalidConfig(format!(
                "rank D={} must satisfy 1 <= D <= T/2 with T={}",
                self.rank, self.frames
            )));
        }
        if self.stride < 1 || self.kernel < self.stride {
            return Err(Error::InvalidConfig(format!(
                "kernel {} must be >= stride {} >= 1",
                self.kernel, self.stride
            )));
        }
        if self.channels < 1 {
            return Err(Error::InvalidConfig("C' must be >= 1".into()));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "ridge must be >= 0, got {}",
                self.ridge
            )));
        }
        self.mlp.validate()
    }

    pub fn descriptor_len(&self) -> usize {
        self.frames * (self.frames - 1) / 2
    }

    pub fn basis_width(&self) -> usize {
        self.frames * self.rank
    }

    /// Extent of the aggregated grid for an input extent.
    pub fn grid_extent(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }
}
