//! Filter binarization: `W ≈ αB` with one positive scale per filter.
//!
//! The closed-form minimizer of `‖W − αB‖²` over `α ≥ 0` and sign vectors
//! `B` is `B = sign(W)`, `α = mean(|W|)`. Sign bits are stored one per weight,
//! most significant bit first, with the final byte zero-padded.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest filter [`brute_force_binarize`] will enumerate.
pub const BRUTE_FORCE_MAX_N: usize = 20;

/// A binarized filter: packed signs plus its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedFilter<T = f32> {
    pub alpha: T,
    /// Packed signs, bit set ↔ +1.
    pub bits: Vec<u8>,
    pub n: usize,
    pub shape: Vec<usize>,
}

impl<T: Scalar> BinarizedFilter<T> {
    pub fn from_parts(alpha: T, bits: Vec<u8>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::invalid("empty filter"));
        }
        if bits.len() != packed_len(n) {
            return Err(Error::shape(format!(
                "{} packed bytes for a filter of {n} weights (need {})",
                bits.len(),
                packed_len(n)
            )));
        }
        if !(alpha >= T::zero()) || !alpha.is_finite() {
            return Err(Error::invalid(format!("filter scale {alpha} must be finite and non-negative")));
        }
        Ok(Self { alpha, bits, n, shape: shape.to_vec() })
    }

    /// Sign of element `i` as ±1.
    pub fn sign(&self, i: usize) -> T {
        if self.bits[i / 8] & (0x80 >> (i % 8)) != 0 {
            T::one()
        } else {
            -T::one()
        }
    }

    pub fn signs(&self) -> Vec<i8> {
        unpack_bits(&self.bits, self.n)
    }

    /// The effective weights `αB`, shaped like the source filter.
    pub fn effective(&self) -> Tensor<T> {
        Tensor::new(&self.shape, (0..self.n).map(|i| self.alpha * self.sign(i)).collect())
            .expect("filter shape is consistent")
    }
}

pub fn packed_len(n: usize) -> usize {
    n.div_ceil(8)
}

/// Packs ±1 signs MSB-first; bit set ↔ +1.
pub fn pack_bits(signs: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(signs.len())];
    for (i, &s) in signs.iter().enumerate() {
        if s > 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<i8> {
    (0..n).map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 }).collect()
}

/// `α = ‖W‖₁ / n`, `B = sign(W)` with `sign(0) = +1`.
pub fn binarize_filter<T: Scalar>(w: &Tensor<T>) -> Result<BinarizedFilter<T>> {
    let n = w.len();
    if n == 0 {
        return Err(Error::invalid("cannot binarize an empty filter"));
    }
    w.ensure_finite("filter")?;
    // Accumulated in f64 so that re-binarizing αB reproduces α bit-exactly.
    let l1: f64 = w.data().iter().map(|x| x.as_f64().abs()).sum();
    let alpha = T::from_f64(l1 / n as f64);
    let mut bits = vec![0u8; packed_len(n)];
    for (i, &x) in w.data().iter().enumerate() {
        if x >= T::zero() {
            bits[i / 8] |= 0x80 >> (i % 8);
        }
    }
    Ok(BinarizedFilter { alpha, bits, n, shape: w.shape().to_vec() })
}

/// `‖W − αB‖²`.
pub fn quantization_error<T: Scalar>(w: &Tensor<T>, f: &BinarizedFilter<T>) -> Result<f64> {
    if w.shape() != f.shape.as_slice() {
        return Err(Error::shape(format!("filter {:?} vs binarized shape {:?}", w.shape(), f.shape)));
    }
    Ok(w.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let d = x.as_f64() - f.alpha.as_f64() * f.sign(i).as_f64();
            d * d
        })
        .sum())
}

/// Straight-through estimate of `∂sign/∂w`: 1 on `|w| ≤ 1`, else 0.
pub fn ste<T: Scalar>(w: T) -> T {
    if w.abs() <= T::one() {
        T::one()
    } else {
        T::zero()
    }
}

/// Maps the gradient w.r.t. the scaled binary weights onto the latent real
/// weights: `g_i · (1/n + ste(w_i)·α)`.
pub fn ste_backward<T: Scalar>(grad_scaled: &Tensor<T>, w: &Tensor<T>, f: &BinarizedFilter<T>) -> Result<Tensor<T>> {
    grad_scaled.check_same_shape(w)?;
    if w.shape() != f.shape.as_slice() {
        return Err(Error::shape(format!("weights {:?} vs binarized shape {:?}", w.shape(), f.shape)));
    }
    let inv_n = T::one() / T::from_f64(f.n as f64);
    grad_scaled.zip_map(w, |g, x| g * (inv_n + ste(x) * f.alpha))
}

/// Binarizes each output filter of a `[c_out, ...]` weight tensor.
pub fn binarize_layer<T: Scalar>(weights: &Tensor<T>) -> Result<Vec<BinarizedFilter<T>>> {
    let c_out = weights.shape()[0];
    let filter_shape = &weights.shape()[1..];
    if filter_shape.is_empty() {
        return Err(Error::shape("layer weights need at least two dimensions"));
    }
    let per = weights.len() / c_out;
    weights.data().chunks(per).map(|chunk| binarize_filter(&Tensor::new(filter_shape, chunk.to_vec())?)).collect()
}

/// Concatenated effective weights of a binarized layer, shaped `[c_out, ...]`.
pub fn effective_layer<T: Scalar>(filters: &[BinarizedFilter<T>]) -> Result<Tensor<T>> {
    let first = filters.first().ok_or_else(|| Error::invalid("layer without filters"))?;
    let mut shape = vec![filters.len()];
    shape.extend_from_slice(&first.shape);
    let mut data = Vec::with_capacity(filters.len() * first.n);
    for f in filters {
        data.extend((0..f.n).map(|i| f.alpha * f.sign(i)));
    }
    Tensor::new(&shape, data)
}

/// Per-filter [`ste_backward`] over a whole `[c_out, ...]` layer.
pub fn ste_backward_layer<T: Scalar>(
    grad_scaled: &Tensor<T>,
    weights: &Tensor<T>,
    filters: &[BinarizedFilter<T>],
) -> Result<Tensor<T>> {
    grad_scaled.check_same_shape(weights)?;
    let per = weights.len() / filters.len();
    let mut out = Vec::with_capacity(weights.len());
    for (f, (g, w)) in filters.iter().zip(grad_scaled.data().chunks(per).zip(weights.data().chunks(per))) {
        let inv_n = T::one() / T::from_f64(f.n as f64);
        out.extend(g.iter().zip(w).map(|(&g, &x)| g * (inv_n + ste(x) * f.alpha)));
    }
    Tensor::new(weights.shape(), out)
}

/// Exhaustive solution of `min ‖W − αB‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub alpha: f64,
    pub signs: Vec<i8>,
    pub error: f64,
}

/// Enumerates all `2^n` sign vectors, each with its optimal scale
/// `α = max(0, B·W/n)`, and returns the global minimizer (first found on ties).
pub fn brute_force_binarize(w: &Tensor<f64>) -> Result<BruteForce> {
    let n = w.len();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::invalid(format!("brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")));
    }
    let x = w.data();
    let mut best: Option<(f64, f64, u32)> = None;
    for mask in 0u32..(1u32 << n) {
        let s = |i: usize| if mask & (1 << i) != 0 { 1.0 } else { -1.0 };
        let dot: f64 = (0..n).map(|i| s(i) * x[i]).sum();
        let alpha = (dot / n as f64).max(0.0);
        let err: f64 = (0..n).map(|i| (x[i] - alpha * s(i)).powi(2)).sum();
        if best.is_none_or(|(e, _, _)| err < e) {
            best = Some((err, alpha, mask));
        }
    }
    let (error, alpha, mask) = best.expect("at least one sign vector");
    let signs = (0..n).map(|i| if mask & (1 << i) != 0 { 1 } else { -1 }).collect();
    Ok(BruteForce { alpha, signs, error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn equal_magnitudes_reconstruct_exactly() {
        let w = t(&[0.5, -0.5, 0.5, -0.5]);
        let f = binarize_filter(&w).unwrap();
        assert_eq!(f.alpha, 0.5);
        assert_eq!(f.signs(), vec![1, -1, 1, -1]);
        assert_eq!(f.effective(), w);
        assert_eq!(quantization_error(&w, &f).unwrap(), 0.0);
    }

    #[test]
    fn mean_absolute_value_scale() {
        let w = t(&[1.0, -2.0, 3.0]);
        let f = binarize_filter(&w).unwrap();
        assert_eq!(f.alpha, 2.0);
        assert_eq!(f.signs(), vec![1, -1, 1]);
        assert_eq!(quantization_error(&w, &f).unwrap(), 2.0);
    }

    #[test]
    fn zero_maps_to_plus_one() {
        let f = binarize_filter(&t(&[0.0, -1.0])).unwrap();
        assert_eq!(f.signs(), vec![1, -1]);
        let z = binarize_filter(&t(&[0.0, 0.0])).unwrap();
        assert_eq!(z.alpha, 0.0);
    }

    #[test]
    fn empty_or_non_finite_rejected() {
        assert!(binarize_filter(&t(&[f64::NAN])).is_err());
        assert!(BinarizedFilter::<f64>::from_parts(1.0, vec![], &[0]).is_err());
    }

    #[test]
    fn closed_form_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..=12);
            let w = Tensor::from_fn(&[n], |_| StandardNormal.sample(&mut rng));
            let f = binarize_filter(&w).unwrap();
            let bf = brute_force_binarize(&w).unwrap();
            assert!((quantization_error(&w, &f).unwrap() - bf.error).abs() <= 1e-9);
            assert_eq!(f.signs(), bf.signs);
            assert!((f.alpha - bf.alpha).abs() <= 1e-12);
        }
    }

    #[test]
    fn closed_form_beats_random_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..=30);
            let w = Tensor::from_fn(&[n], |_| StandardNormal.sample(&mut rng));
            let best = quantization_error(&w, &binarize_filter(&w).unwrap()).unwrap();
            for _ in 0..100 {
                let signs: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
                let alpha: f64 = rng.random_range(0.0..3.0);
                let cand = BinarizedFilter::from_parts(alpha, pack_bits(&signs), &[n]).unwrap();
                assert!(best <= quantization_error(&w, &cand).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn brute_force_small_cases() {
        let b = brute_force_binarize(&t(&[3.0])).unwrap();
        assert_eq!((b.alpha, b.signs.clone(), b.error), (3.0, vec![1], 0.0));
        let b = brute_force_binarize(&t(&[1.0, 1.0])).unwrap();
        assert_eq!((b.alpha, b.signs.clone(), b.error), (1.0, vec![1, 1], 0.0));
        assert!(brute_force_binarize(&Tensor::zeros(&[21])).is_err());
    }

    #[test]
    fn ste_backward_examples() {
        let w = t(&[0.5, 2.0]);
        let f = binarize_filter(&w).unwrap();
        assert_eq!(f.alpha, 1.25);
        let g = ste_backward(&t(&[1.0, 1.0]), &w, &f).unwrap();
        assert_eq!(g.data(), &[1.75, 0.5]);
        let z = ste_backward(&t(&[0.0, 0.0]), &w, &f).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        assert!(ste_backward(&t(&[1.0]), &w, &f).is_err());
    }

    #[test]
    fn ste_backward_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let w = Tensor::from_fn(&[n], |_| rng.random_range(-2.0..2.0));
            let g = Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0));
            let f = binarize_filter(&w).unwrap();
            let got = ste_backward(&g, &w, &f).unwrap();
            let alpha = w.data().iter().map(|x: &f64| x.abs()).sum::<f64>() / n as f64;
            for i in 0..n {
                let d = if w.data()[i].abs() <= 1.0 { 1.0 } else { 0.0 };
                assert_eq!(got.data()[i], g.data()[i] * (1.0 / n as f64 + d * alpha));
            }
        }
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_bits(&[1, -1, 1, -1, 1, -1, 1, -1]), vec![0xAA]);
        assert_eq!(pack_bits(&[1, 1, 1]), vec![0xE0]);
        assert_eq!(pack_bits(&[1; 9]), vec![0xFF, 0x80]);
    }

    #[test]
    fn layer_helpers_agree_with_per_filter_calls() {
        let w = Tensor::<f32>::from_fn(&[3, 2, 3, 3], |i| ((i * 7919) % 23) as f32 / 11.0 - 1.0);
        let filters = binarize_layer(&w).unwrap();
        assert_eq!(filters.len(), 3);
        let eff = effective_layer(&filters).unwrap();
        assert_eq!(eff.shape(), w.shape());
        for (o, f) in filters.iter().enumerate() {
            assert_eq!(&eff.data()[o * 18..(o + 1) * 18], f.effective().data());
        }
        let g = Tensor::full(w.shape(), 1.0);
        let gl = ste_backward_layer(&g, &w, &filters).unwrap();
        for (o, f) in filters.iter().enumerate() {
            let wf = Tensor::new(&[2, 3, 3], w.data()[o * 18..(o + 1) * 18].to_vec()).unwrap();
            let gf = ste_backward(&Tensor::full(&[2, 3, 3], 1.0), &wf, f).unwrap();
            assert_eq!(&gl.data()[o * 18..(o + 1) * 18], gf.data());
        }
    }

    #[test]
    fn rebinarizing_effective_weights_is_exact() {
        let w = Tensor::<f32>::from_fn(&[1152], |i| ((i * 104729) % 997) as f32 / 997.0 - 0.5);
        let f = binarize_filter(&w).unwrap();
        let again = binarize_filter(&f.effective()).unwrap();
        assert_eq!(f, again);
    }

    fn filter_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![-10.0..-1e-3f64, 1e-3..10.0f64], 1..=12)
    }

    proptest! {
        #[test]
        fn pack_roundtrip(signs in prop::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..=64)) {
            prop_assert_eq!(unpack_bits(&pack_bits(&signs), signs.len()), signs);
        }

        #[test]
        fn positive_scale_invariance(v in filter_strategy(), k in 0.01f64..100.0) {
            let f = binarize_filter(&t(&v)).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let g = binarize_filter(&t(&scaled)).unwrap();
            prop_assert_eq!(&f.bits, &g.bits);
            prop_assert!((g.alpha - k * f.alpha).abs() <= 1e-12 * g.alpha.abs().max(1.0));
        }

        #[test]
        fn negation_flips_every_bit(v in filter_strategy()) {
            let f = binarize_filter(&t(&v)).unwrap();
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let g = binarize_filter(&t(&neg)).unwrap();
            prop_assert_eq!(f.alpha, g.alpha);
            let flipped: Vec<i8> = f.signs().iter().map(|s| -s).collect();
            prop_assert_eq!(g.signs(), flipped);
        }

        #[test]
        fn residual_closed_form(v in filter_strategy()) {
            let w = t(&v);
            let f = binarize_filter(&w).unwrap();
            let direct = quantization_error(&w, &f).unwrap();
            let closed = w.sum_squares() - v.len() as f64 * f.alpha * f.alpha;
            prop_assert!((direct - closed).abs() <= 1e-9 * direct.abs().max(w.sum_squares()).max(1e-300));
        }
    }
}
