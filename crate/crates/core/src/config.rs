//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! ```text
//! [pwtp]
//! T = 8
//! mlp.beta = 0.25
//! [joint]
//! mode = mgda
//! ```
//!
//! `#` starts a comment. Unknown sections and keys are errors.

use std::path::Path;

use crate::datagen::SynthSpec;
use crate::error::{Error, Result};
use crate::objectives::JointMode;
use crate::pwtp::PwtpConfig;
use crate::recognizer::InputMode;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pwtp: PwtpConfig,
    pub train: TrainConfig,
    pub mode: JointMode,
    pub input: InputMode,
    pub data: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pwtp: PwtpConfig::default(),
            train: TrainConfig::default(),
            mode: JointMode::Mgda,
            input: InputMode::Da,
            data: SynthSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("line {line}: bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["pwtp", "train", "joint", "data"].contains(&section.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "line {n}: unknown section [{section}]"
                    )));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {n}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "line {n}: {key} is outside any section"
                )));
            }
            let full = format!("{section}.{key}");
            if seen.contains(&full) {
                return Err(Error::InvalidConfig(format!("line {n}: {full} set twice")));
            }
            seen.push(full.clone());
            cfg.set(n, &section, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, n: usize, section: &str, key: &str, v: &str) -> Result<()> {
        let (p, t, d) = (&mut self.pwtp, &mut self.train, &mut self.data);
        match (section, key) {
            ("pwtp", "T") => p.frames = parse(n, key, v)?,
            ("pwtp", "D") => p.rank = parse(n, key, v)?,
            ("pwtp", "k") => p.kernel = parse(n, key, v)?,
            ("pwtp", "s") => p.stride = parse(n, key, v)?,
            ("pwtp", "c_prime") => p.channels = parse(n, key, v)?,
            ("pwtp", "ridge") => p.ridge = parse(n, key, v)?,
            ("pwtp", "mlp.r") => p.mlp.expansion = parse(n, key, v)?,
            ("pwtp", "mlp.beta") => p.mlp.bottleneck = parse(n, key, v)?,
            ("pwtp", "mlp.blocks") => p.mlp.blocks = parse(n, key, v)?,
            ("train", "lr") => t.lr = parse(n, key, v)?,
            ("train", "momentum") => t.momentum = parse(n, key, v)?,
            ("train", "steps") => t.steps = parse(n, key, v)?,
            ("train", "batch") => t.batch = parse(n, key, v)?,
            ("train", "warmup_steps") => t.warmup_steps = parse(n, key, v)?,
            ("train", "weight_decay") => t.weight_decay = parse(n, key, v)?,
            ("train", "clip_norm") => t.clip_norm = parse(n, key, v)?,
            ("train", "label_smoothing") => t.label_smoothing = parse(n, key, v)?,
            ("train", "pretrain_steps") => t.pretrain_steps = parse(n, key, v)?,
            ("train", "seed") => t.seed = parse(n, key, v)?,
            ("joint", "mode") => self.mode = v.parse()?,
            ("joint", "input") => self.input = v.parse()?,
            ("data", "H") => d.height = parse(n, key, v)?,
            ("data", "W") => d.width = parse(n, key, v)?,
            ("data", "S") => d.segments = parse(n, key, v)?,
            ("data", "T") => d.frames = parse(n, key, v)?,
            ("data", "K") => d.classes = parse(n, key, v)?,
            ("data", "n_train") => d.n_train = parse(n, key, v)?,
            ("data", "n_test") => d.n_test = parse(n, key, v)?,
            ("data", "confound") => d.confound = parse(n, key, v)?,
            ("data", "backgrounds") => d.backgrounds = parse(n, key, v)?,
            ("data", "seed") => d.seed = parse(n, key, v)?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "line {n}: unknown key {key:?} in [{section}]"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pwtp.validate()?;
        self.train.validate()?;
        self.mode.validate()?;
        self.data.validate()?;
        if self.data.frames != self.pwtp.frames {
            return Err(Error::InvalidConfig(format!(
                "data T = {} but pwtp T = {}",
                self.data.frames, self.pwtp.frames
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!((d.train.lr, d.train.batch, d.train.steps), (0.05, 8, 2000));
        assert_eq!((d.train.warmup_steps, d.train.weight_decay), (100, 1e-4));
    }

    #[test]
    fn parses_all_sections() {
        let text = "
# small run
[pwtp]
T = 4
D = 1
k = 4   # kernel
s = 4
c_prime = 6
mlp.blocks = 2
[train]
lr = 0.1
steps = 10
[joint]
mode = sched:0.2,0.3
input = rgb
[data]
T = 4
H = 16
W = 16
confound = 0.5
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!((c.pwtp.frames, c.pwtp.kernel, c.pwtp.channels), (4, 4, 6));
        assert_eq!(c.pwtp.mlp.blocks, 2);
        assert_eq!((c.train.lr, c.train.steps), (0.1, 10));
        assert_eq!(
            c.mode,
            JointMode::Scheduled {
                gamma: 0.2,
                lambda: 0.3
            }
        );
        assert_eq!(c.input, InputMode::RgbBaseline);
        assert_eq!((c.data.height, c.data.confound), (16, 0.5));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "[pwtp]\nQ = 1",
            "[model]\nT = 8",
            "T = 8",
            "[pwtp]\nT = eight",
            "[pwtp]\nT 8",
            "[pwtp]\nk = 9\nk = 9",
            "[joint]\nmode = constant:2",
            "[pwtp]\nT = 4",
            "[train]\nmomentum = 1.0",
            "[data]\nconfound = -0.1",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?} accepted");
        }
    }
}
