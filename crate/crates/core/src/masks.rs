//! Binary ground-truth masks, soft predicted masks, and masking.

use ndarray::{Array2, Zip};

use crate::autodiff::BCE_EPS;
use crate::dsp::{ComplexSpectrogram, MagnitudeSpectrogram};
use crate::error::{Error, Result};

/// Per-cell dominance indicator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<bool>,
}

/// Per-cell weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    values: Array2<f64>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        BinaryMask { values }
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            values: self.values.mapv(|v| !v),
        }
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }
}

impl SoftMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("mask value {v} outside [0, 1]")));
        }
        Ok(SoftMask { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

impl From<&BinaryMask> for SoftMask {
    fn from(m: &BinaryMask) -> Self {
        SoftMask { values: m.to_f64() }
    }
}

fn check_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// 1 where the source magnitude is at least the mixture magnitude.
pub fn ground_truth_mask(
    source: &MagnitudeSpectrogram,
    mixture: &MagnitudeSpectrogram,
) -> Result<BinaryMask> {
    dominance_mask(&source.values, &mixture.values)
}

/// [`ground_truth_mask`] on bare grids.
pub fn dominance_mask(source: &Array2<f64>, mixture: &Array2<f64>) -> Result<BinaryMask> {
    check_dims("ground_truth_mask", source.dim(), mixture.dim())?;
    let values = Zip::from(source).and(mixture).map_collect(|s, m| s >= m);
    Ok(BinaryMask { values })
}

/// Scales every complex cell by the mask weight.
pub fn apply_mask(s: &ComplexSpectrogram, m: &SoftMask) -> Result<ComplexSpectrogram> {
    check_dims("apply_mask", s.values.dim(), m.dim())?;
    let values = Zip::from(&s.values)
        .and(&m.values)
        .map_collect(|c, &w| c * w);
    Ok(ComplexSpectrogram {
        values,
        ..s.clone()
    })
}

pub fn apply_mask_magnitude(s: &MagnitudeSpectrogram, m: &SoftMask) -> Result<MagnitudeSpectrogram> {
    check_dims("apply_mask", s.values.dim(), m.dim())?;
    Ok(s.with_values(&s.values * &m.values))
}

/// Mean per-cell binary cross-entropy, predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_mask_loss(pred: &SoftMask, gt: &BinaryMask) -> Result<f64> {
    check_dims("bce_mask_loss", pred.dim(), gt.dim())?;
    let n = pred.values.len() as f64;
    let total: f64 = Zip::from(&pred.values)
        .and(&gt.values)
        .fold(0.0, |acc, &p, &t| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc - if t { p.ln() } else { (1.0 - p).ln() }
        });
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tensor};
    use crate::dsp::{FreqAxis, TimeAxis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rustfft::num_complex::Complex64;

    fn mag(values: Array2<f64>) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values,
            freq_axis: FreqAxis::Linear,
            time_axis: TimeAxis::Frames,
            window_size: 256,
            hop: 128,
            sample_rate_hz: 8000,
        }
    }

    #[test]
    fn equal_spectrograms_give_all_ones() {
        let s = mag(Array2::from_elem((4, 5), 0.7));
        let m = ground_truth_mask(&s, &s).unwrap();
        assert!(m.values().iter().all(|&v| v));
    }

    #[test]
    fn silent_source_gives_all_zeros() {
        let s = mag(Array2::zeros((4, 5)));
        let mix = mag(Array2::from_elem((4, 5), 0.1));
        assert!(ground_truth_mask(&s, &mix).unwrap().values().iter().all(|&v| !v));
    }

    #[test]
    fn single_cells() {
        let s = mag(Array2::from_shape_vec((1, 2), vec![0.5, 0.3]).unwrap());
        let mix = mag(Array2::from_elem((1, 2), 0.4));
        let m = ground_truth_mask(&s, &mix).unwrap();
        assert_eq!(m.values().as_slice().unwrap(), &[true, false]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = mag(Array2::zeros((2, 2)));
        let b = mag(Array2::zeros((2, 3)));
        assert!(ground_truth_mask(&a, &b).is_err());
        let sm = SoftMask::new(Array2::zeros((2, 3))).unwrap();
        let bm = BinaryMask::new(Array2::from_elem((3, 2), true));
        assert!(bce_mask_loss(&sm, &bm).is_err());
    }

    fn random_spec(rows: usize, cols: usize, seed: u64) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexSpectrogram {
            values: Array2::from_shape_fn((rows, cols), |_| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            }),
            window_size: 256,
            hop: 128,
            sample_rate_hz: 8000,
        }
    }

    #[test]
    fn mask_identities() {
        let s = random_spec(5, 6, 1);
        let ones = SoftMask::new(Array2::ones((5, 6))).unwrap();
        assert_eq!(apply_mask(&s, &ones).unwrap(), s);
        let zeros = SoftMask::new(Array2::zeros((5, 6))).unwrap();
        assert!(apply_mask(&s, &zeros).unwrap().values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn complementary_masks_partition() {
        let s = random_spec(5, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = BinaryMask::new(Array2::from_shape_fn((5, 6), |_| rng.random_bool(0.5)));
        let a = apply_mask(&s, &SoftMask::from(&m)).unwrap();
        let b = apply_mask(&s, &SoftMask::from(&m.complement())).unwrap();
        for ((x, y), z) in a.values.iter().zip(b.values.iter()).zip(s.values.iter()) {
            assert!((x + y - z).norm() <= 1e-9);
        }
    }

    #[test]
    fn bce_closed_forms() {
        let half = SoftMask::new(Array2::from_elem((3, 3), 0.5)).unwrap();
        let gt = BinaryMask::new(Array2::from_shape_fn((3, 3), |(i, j)| (i + j) % 2 == 0));
        assert!((bce_mask_loss(&half, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let perfect = SoftMask::from(&gt);
        let l = bce_mask_loss(&perfect, &gt).unwrap();
        assert!((l - (-(1.0 - BCE_EPS).ln())).abs() < 1e-15);
        assert!((l - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
        let mut oracle = 0.0;
        for i in 0..16 {
            let q = p[i].clamp(1e-7, 1.0 - 1e-7);
            let y = if t[i] { 1.0 } else { 0.0 };
            oracle += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        }
        oracle /= 16.0;
        let pred = SoftMask::new(Array2::from_shape_vec((4, 4), p).unwrap()).unwrap();
        let gt = BinaryMask::new(Array2::from_shape_vec((4, 4), t).unwrap());
        assert!((bce_mask_loss(&pred, &gt).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.95)).collect();
            let t: Vec<f64> = (0..12).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let target = Tensor::new([3, 4], t).unwrap();
            let check = gradcheck(&[Tensor::new([3, 4], p).unwrap()], 1e-6, |tape, v| {
                tape.bce(v[0], &target)
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
        }
    }

    proptest! {
        #[test]
        fn gt_mask_is_monotone(seed in 0u64..10_000, bump in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..1.0));
            let m = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..1.0));
            let before = ground_truth_mask(&mag(s.clone()), &mag(m.clone())).unwrap();
            let (r, c) = (rng.random_range(0..4), rng.random_range(0..4));
            let mut raised = s;
            raised[[r, c]] += bump;
            let after = ground_truth_mask(&mag(raised), &mag(m)).unwrap();
            prop_assert!(!(before.values()[[r, c]] && !after.values()[[r, c]]));
        }

        #[test]
        fn bce_is_nonnegative(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SoftMask::new(Array2::from_shape_fn((3, 5), |_| rng.random_range(0.0..=1.0))).unwrap();
            let t = BinaryMask::new(Array2::from_shape_fn((3, 5), |_| rng.random_bool(0.5)));
            prop_assert!(bce_mask_loss(&p, &t).unwrap() >= 0.0);
        }
    }
}
