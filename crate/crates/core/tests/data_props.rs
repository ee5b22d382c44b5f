use std::collections::HashSet;

use proptest::prelude::*;
use pwtp::datagen::{glyph_kinds, make_dataset, LabeledClip, SynthSpec};
use pwtp::numeric::Tensor;
use pwtp::pwtp::{project, residual_and_da};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn digest(clip: &LabeledClip) -> Vec<u8> {
    let mut h = Sha256::new();
    for v in clip.clip.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().to_vec()
}

/// p-value of Pearson's independence test on a contingency table.
fn chi_square_p(table: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let n: f64 = rows.iter().sum();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, obs) in r.iter().enumerate() {
            let expected = rows[i] * cols[j] / n;
            stat += (obs - expected).powi(2) / expected;
        }
    }
    let dof = ((rows.len() - 1) * (cols.len() - 1)) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn glyph_is_independent_of_label() {
    let spec = SynthSpec {
        n_train: 400,
        n_test: 4,
        ..SynthSpec::default()
    };
    let ds = make_dataset(&spec).unwrap();
    // last column counts clips without a glyph
    let mut table = vec![vec![0.0; glyph_kinds() + 1]; spec.classes];
    for c in &ds.train {
        table[c.label][c.glyph_id.unwrap_or(glyph_kinds())] += 1.0;
    }
    let p = chi_square_p(&table);
    assert!(p > 0.01, "glyph/label dependence p = {p}");
}

#[test]
fn train_and_test_clips_are_disjoint() {
    let ds = make_dataset(&SynthSpec::default()).unwrap();
    let train: HashSet<_> = ds.train.iter().map(digest).collect();
    assert_eq!(train.len(), ds.train.len());
    assert!(ds.test.iter().all(|c| !train.contains(&digest(c))));
}

#[test]
fn mean_basis_leaves_residual_only_on_swept_pixels() {
    let spec = SynthSpec {
        n_train: 4,
        n_test: 4,
        ..SynthSpec::default()
    };
    let ds = make_dataset(&spec).unwrap();
    let [_, t, h, w, _] = spec.clip_shape();
    let ones = Tensor::full(&[h * w, t, 1], 1.0);
    for clip in &ds.train {
        for s in 0..spec.segments {
            let seg = clip.clip.index_axis0(s);
            let (_, xh) = project(&seg, &ones, 0.0).unwrap();
            let (p, _) = residual_and_da(&seg, &xh).unwrap();
            let (mut swept, mut still) = (0.0, 0.0);
            for ti in 0..t {
                for i in 0..h * w {
                    let e: f64 = (0..3)
                        .map(|c| p.data()[(ti * h * w + i) * 3 + c].powi(2))
                        .sum();
                    if clip.motion_mask[s * h * w + i] {
                        swept += e;
                    } else {
                        still += e;
                    }
                }
            }
            assert!(still < 1e-24, "static pixels left {still}");
            assert!(swept > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_seed_deterministic_and_balanced(seed in any::<u64>(), n in 4usize..20) {
        let spec = SynthSpec { seed, n_train: n, n_test: 4, ..SynthSpec::default() };
        let a = make_dataset(&spec).unwrap();
        prop_assert_eq!(&a, &make_dataset(&spec).unwrap());
        let mut counts = vec![0usize; spec.classes];
        for c in &a.train {
            counts[c.label] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}
