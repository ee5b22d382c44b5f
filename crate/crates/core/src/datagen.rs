//! Synthetic clips where a square moves over a static cluttered scene.
//!
//! The label is the direction of motion. Backgrounds come from a shared pool and
//! may carry a static glyph tied to the background, so nothing static in a clip
//! says anything about the label. Each segment restarts the square at a random
//! point of its path, which makes the temporal mean of a segment identical in
//! distribution for opposite directions.

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

pub const CHANNELS: usize = 3;
pub const SQUARE: usize = 12;
pub const GLYPH: usize = 5;
/// Pixel displacement per frame.
pub const SPEED: usize = 1;

const BACKGROUND_STREAM: u64 = 0x6267_706f_6f6c;
const BG_LOW: f64 = 0.2;
const BG_HIGH: f64 = 0.6;
const FG_LOW: f64 = 0.7;
const FG_HIGH: f64 = 0.9;

/// Motion direction per class index.
pub const DIRECTIONS: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
pub const DIRECTION_NAMES: [&str; 4] = ["left", "right", "up", "down"];

const GLYPHS: [[u8; GLYPH]; 4] = [
    [0b00100, 0b00100, 0b11111, 0b00100, 0b00100],
    [0b11111, 0b10001, 0b10001, 0b10001, 0b11111],
    [0b10000, 0b01000, 0b00100, 0b00010, 0b00001],
    [0b10101, 0b01010, 0b10101, 0b01010, 0b10101],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub segments: usize,
    pub frames: usize,
    /// Motion classes, 2 to 4 (left, right, up, down in that order).
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability that a clip carries its background's glyph.
    pub confound: f64,
    pub backgrounds: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            segments: 4,
            frames: 8,
            classes: 4,
            n_train: 160,
            n_test: 80,
            confound: 0.9,
            backgrounds: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(2..=DIRECTIONS.len()).contains(&self.classes) {
            return bad(format!("classes must be in 2..=4, got {}", self.classes));
        }
        if self.segments == 0 || self.frames < 2 {
            return bad("need at least one segment of two frames".into());
        }
        let path = SQUARE + SPEED * (self.frames - 1);
        if self.height < path || self.width < path || self.height < GLYPH || self.width < GLYPH {
            return bad(format!(
                "{}x{} frame cannot hold a {SQUARE}px square moving {} frames",
                self.height, self.width, self.frames
            ));
        }
        if !(0.0..=1.0).contains(&self.confound) {
            return bad(format!("confound strength {} not in [0, 1]", self.confound));
        }
        if self.backgrounds == 0 {
            return bad("background pool is empty".into());
        }
        if self.n_train < self.classes || self.n_test < self.classes {
            return bad("each split needs at least one clip per class".into());
        }
        Ok(())
    }

    pub fn clip_shape(&self) -> [usize; 5] {
        [
            self.segments,
            self.frames,
            self.height,
            self.width,
            CHANNELS,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    /// `[S, T, H, W, 3]`
    pub clip: Tensor,
    pub label: usize,
    pub background_id: usize,
    pub glyph_id: Option<usize>,
    /// `[S, H, W]`, true where the square passes during the segment.
    pub motion_mask: Vec<bool>,
}

impl LabeledClip {
    /// `index<TAB>label<TAB>background_id<TAB>glyph_id`, glyph `-1` when absent.
    pub fn manifest_line(&self, index: usize) -> String {
        let glyph = self.glyph_id.map_or(-1, |g| g as i64);
        format!("{index}\t{}\t{}\t{glyph}", self.label, self.background_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
}

fn color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; CHANNELS] {
    [rng.range(lo, hi), rng.range(lo, hi), rng.range(lo, hi)]
}

/// Cluttered `[H, W, 3]` scene for pool entry `id`; the same for every clip.
pub fn background(spec: &SynthSpec, id: usize) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = Rng::substream(spec.seed ^ BACKGROUND_STREAM, id as u64);
    let base = color(&mut rng, BG_LOW, BG_HIGH);
    let mut img: Vec<f64> = (0..h * w).flat_map(|_| base).collect();
    for _ in 0..6 {
        let rh = 2 + rng.below(h / 2);
        let rw = 2 + rng.below(w / 2);
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        let c = color(&mut rng, BG_LOW, BG_HIGH);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img[(y * w + x) * CHANNELS..][..CHANNELS].copy_from_slice(&c);
            }
        }
    }
    img
}

/// Glyph identity carried by a background.
pub fn glyph_for_background(id: usize) -> usize {
    id % GLYPHS.len()
}

pub fn glyph_kinds() -> usize {
    GLYPHS.len()
}

/// Render one clip from `rng`. The background is drawn from the pool.
pub fn render_clip(spec: &SynthSpec, rng: &mut Rng, label: usize) -> Result<LabeledClip> {
    spec.validate()?;
    if label >= spec.classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: spec.classes,
        });
    }
    let [s, t, h, w, c] = spec.clip_shape();
    let background_id = rng.below(spec.backgrounds);
    let mut scene = background(spec, background_id);
    let glyph_id = if rng.bernoulli(spec.confound) {
        let id = glyph_for_background(background_id);
        let y0 = rng.below(h - GLYPH + 1);
        let x0 = rng.below(w - GLYPH + 1);
        let ink = color(rng, FG_LOW, FG_HIGH);
        for (dy, row) in GLYPHS[id].iter().enumerate() {
            for dx in 0..GLYPH {
                if row >> (GLYPH - 1 - dx) & 1 == 1 {
                    scene[((y0 + dy) * w + x0 + dx) * c..][..c].copy_from_slice(&ink);
                }
            }
        }
        Some(id)
    } else {
        None
    };
    let ink = color(rng, FG_LOW, FG_HIGH);
    let (dy, dx) = DIRECTIONS[label];
    let travel = SPEED * (t - 1);
    let frame = h * w * c;
    let mut data = Vec::with_capacity(s * t * frame);
    let mut motion_mask = vec![false; s * h * w];
    for si in 0..s {
        // Top-left corner at frame 0; the whole path stays inside the frame.
        let start = |d: isize, extent: usize, rng: &mut Rng| -> usize {
            match d {
                0 => rng.below(extent - SQUARE + 1),
                1 => rng.below(extent - SQUARE - travel + 1),
                _ => travel + rng.below(extent - SQUARE - travel + 1),
            }
        };
        let y0 = start(dy, h, rng);
        let x0 = start(dx, w, rng);
        for ti in 0..t {
            let step = (SPEED * ti) as isize;
            let y = (y0 as isize + dy * step) as usize;
            let x = (x0 as isize + dx * step) as usize;
            let mut img = scene.clone();
            for yy in y..y + SQUARE {
                for xx in x..x + SQUARE {
                    img[(yy * w + xx) * c..][..c].copy_from_slice(&ink);
                    motion_mask[(si * h + yy) * w + xx] = true;
                }
            }
            data.extend(img);
        }
    }
    Ok(LabeledClip {
        clip: Tensor::new(&spec.clip_shape(), data)?,
        label,
        background_id,
        glyph_id,
        motion_mask,
    })
}

fn split(spec: &SynthSpec, n: usize, parity: u64) -> Result<Vec<LabeledClip>> {
    (0..n)
        .map(|i| {
            let mut rng = Rng::substream(spec.seed, 2 * i as u64 + parity);
            render_clip(spec, &mut rng, i % spec.classes)
        })
        .collect()
}

/// Class-balanced train and test sets. Clip `i` of a split has label
/// `i mod K` and its own random substream, so generation order is irrelevant.
pub fn make_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        train: split(spec, spec.n_train, 0)?,
        test: split(spec, spec.n_test, 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_train: 8,
            n_test: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small();
        let a = render_clip(&spec, &mut Rng::new(9), 2).unwrap();
        let b = render_clip(&spec, &mut Rng::new(9), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unmasked_pixels_are_static() {
        let spec = small();
        let mut rng = Rng::new(1);
        for label in 0..4 {
            let lc = render_clip(&spec, &mut rng, label).unwrap();
            let [s, t, h, w, c] = spec.clip_shape();
            let mut moving = 0;
            for si in 0..s {
                for y in 0..h {
                    for x in 0..w {
                        let swept = lc.motion_mask[(si * h + y) * w + x];
                        moving += swept as usize;
                        if swept {
                            continue;
                        }
                        for ch in 0..c {
                            let v0 = lc.clip.get(&[si, 0, y, x, ch]);
                            for ti in 1..t {
                                assert_eq!(lc.clip.get(&[si, ti, y, x, ch]), v0);
                            }
                        }
                    }
                }
            }
            // a 6px square sliding 7px sweeps 6 x 13 pixels per segment
            assert_eq!(moving, s * SQUARE * (SQUARE + 7));
        }
    }

    #[test]
    fn square_moves_in_label_direction() {
        let spec = SynthSpec {
            confound: 0.0,
            ..small()
        };
        let (h, w) = (spec.height, spec.width);
        let mut rng = Rng::new(4);
        for (label, &(dy, dx)) in DIRECTIONS.iter().enumerate() {
            let lc = render_clip(&spec, &mut rng, label).unwrap();
            let scene = background(&spec, lc.background_id);
            let centroid = |si: usize, ti: usize| {
                let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        if lc.clip.get(&[si, ti, y, x, 0]) != scene[(y * w + x) * CHANNELS] {
                            sy += y as f64;
                            sx += x as f64;
                            n += 1.0;
                        }
                    }
                }
                assert_eq!(n, (SQUARE * SQUARE) as f64);
                (sy / n, sx / n)
            };
            for si in 0..spec.segments {
                for ti in 1..spec.frames {
                    let (y0, x0) = centroid(si, ti - 1);
                    let (y1, x1) = centroid(si, ti);
                    assert_eq!((y1 - y0, x1 - x0), (dy as f64, dx as f64));
                }
            }
        }
    }

    #[test]
    fn zero_confound_has_no_glyph() {
        let spec = SynthSpec {
            confound: 0.0,
            ..small()
        };
        let ds = make_dataset(&spec).unwrap();
        assert!(ds
            .train
            .iter()
            .chain(&ds.test)
            .all(|c| c.glyph_id.is_none()));
        let spec = SynthSpec {
            confound: 1.0,
            ..small()
        };
        let ds = make_dataset(&spec).unwrap();
        assert!(ds
            .train
            .iter()
            .all(|c| c.glyph_id == Some(glyph_for_background(c.background_id))));
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let spec = SynthSpec {
            n_train: 40,
            ..small()
        };
        let ds = make_dataset(&spec).unwrap();
        for k in 0..4 {
            assert_eq!(ds.train.iter().filter(|c| c.label == k).count(), 10);
        }
        assert_eq!(make_dataset(&spec).unwrap(), ds);
    }

    #[test]
    fn palette_bands() {
        let ds = make_dataset(&small()).unwrap();
        for lc in &ds.train {
            assert!(lc.clip.data().iter().all(|v| (BG_LOW..FG_HIGH).contains(v)));
        }
    }

    #[test]
    fn manifest_format() {
        let spec = SynthSpec {
            confound: 0.0,
            ..small()
        };
        let lc = render_clip(&spec, &mut Rng::new(0), 3).unwrap();
        assert_eq!(
            lc.manifest_line(7),
            format!("7\t3\t{}\t-1", lc.background_id)
        );
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec {
                classes: 5,
                ..small()
            },
            SynthSpec {
                height: 12,
                ..small()
            },
            SynthSpec {
                confound: 1.5,
                ..small()
            },
            SynthSpec {
                n_test: 3,
                ..small()
            },
        ] {
            assert!(spec.validate().is_err());
        }
        assert!(render_clip(&small(), &mut Rng::new(0), 4).is_err());
    }
}
