use crate::patches::Patch;

/// Per-channel feature count.
pub const PER_CHANNEL: usize = 13;
pub const HIST_BINS: usize = 8;
/// Histogram range in z-score units.
pub const HIST_RANGE: (f64, f64) = (-3.0, 3.0);

/// Feature length for `k` channels.
pub fn feature_len(k: usize) -> usize {
    PER_CHANNEL * k + 1
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = v.clone().sum::<f64>() / n as f64;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Per channel, over organ pixels: mean, standard deviation, an 8-bin
/// histogram on [-3, 3] (values clamped into the end bins), then over
/// interior pixels (pixel and its four neighbours in the organ, away from
/// the patch border): mean and standard deviation of the central-difference
/// gradient magnitude and the mean absolute 4-neighbour Laplacian. Coverage
/// comes last. A channel that is identically zero yields 13 zeros.
pub fn featurize(p: &Patch, s: usize) -> Vec<f64> {
    let k = p.data.len() / (s * s);
    let mut out = Vec::with_capacity(feature_len(k));
    let inside = |r: usize, c: usize| p.mask[r * s + c] == 1;
    let interior: Vec<(usize, usize)> = (1..s.saturating_sub(1))
        .flat_map(|r| (1..s - 1).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            inside(r, c) && inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1)
        })
        .collect();
    for ch in 0..k {
        let plane = p.channel(ch, s);
        if plane.iter().all(|&v| v == 0.0) {
            out.extend([0.0; PER_CHANNEL]);
            continue;
        }
        let at = |r: usize, c: usize| plane[r * s + c] as f64;
        let organ = (0..s * s).filter(|&i| p.mask[i] == 1).map(|i| plane[i] as f64);
        let (mean, sd) = mean_std(organ.clone());
        out.extend([mean, sd]);
        let mut hist = [0.0; HIST_BINS];
        let n = organ.clone().count();
        let (lo, hi) = HIST_RANGE;
        for v in organ {
            let b = ((v - lo) / (hi - lo) * HIST_BINS as f64).floor();
            hist[b.clamp(0.0, (HIST_BINS - 1) as f64) as usize] += 1.0;
        }
        if n > 0 {
            hist.iter_mut().for_each(|h| *h /= n as f64);
        }
        out.extend(hist);
        let grad = interior.iter().map(|&(r, c)| {
            let gx = (at(r, c + 1) - at(r, c - 1)) / 2.0;
            let gy = (at(r + 1, c) - at(r - 1, c)) / 2.0;
            gx.hypot(gy)
        });
        let (gm, gs) = mean_std(grad);
        let lap = interior.iter().map(|&(r, c)| {
            (at(r, c + 1) + at(r, c - 1) + at(r + 1, c) + at(r - 1, c) - 4.0 * at(r, c)).abs()
        });
        let (lm, _) = mean_std(lap);
        out.extend([gm, gs, lm]);
    }
    out.push(p.coverage);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patches::Augment;
    use proptest::prelude::*;

    fn patch(s: usize, planes: Vec<Vec<f32>>, mask: Vec<u8>) -> Patch {
        let coverage = mask.iter().filter(|&&m| m == 1).count() as f64 / (s * s) as f64;
        Patch {
            subject_id: "t".into(),
            slice_index: 0,
            grid_xy: [0, 0],
            data: planes.concat(),
            mask,
            coverage,
            label: None,
            augment: None,
        }
    }

    #[test]
    fn constant_zero_and_ramp() {
        let s = 8;
        let ramp: Vec<f32> = (0..s * s).map(|i| 0.25 * (i % s) as f32 - 0.5 * (i / s) as f32).collect();
        let p = patch(s, vec![vec![1.5; s * s], vec![0.0; s * s], ramp], vec![1; s * s]);
        let f = featurize(&p, s);
        assert_eq!(f.len(), feature_len(3));
        assert_eq!(f[0], 1.5);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2..10].iter().filter(|&&h| h == 1.0).count(), 1);
        assert_eq!(f[2..10].iter().sum::<f64>(), 1.0);
        assert_eq!(&f[13..26], &[0.0; 13]);
        let slope = (0.25f64.powi(2) + 0.5f64.powi(2)).sqrt();
        assert!((f[26 + 10] - slope).abs() < 1e-6);
        assert!(f[26 + 11].abs() < 1e-6);
        assert!(f[26 + 12].abs() < 1e-6);
        assert_eq!(*f.last().unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn invariant_under_flips_and_rotations(
            vals in proptest::collection::vec(-4.0f32..4.0, 64),
            mask in proptest::collection::vec(0u8..2, 64),
        ) {
            let s = 8;
            let p = patch(s, vec![vals], mask);
            let f = featurize(&p, s);
            prop_assert!(f.iter().all(|v| v.is_finite()));
            for a in Augment::ALL {
                let g = featurize(&p.augmented(a, s), s);
                for (x, y) in f.iter().zip(&g) {
                    prop_assert!((x - y).abs() < 1e-9, "{a:?}: {x} vs {y}");
                }
            }
        }
    }
}
