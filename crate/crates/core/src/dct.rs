//! Orthonormal 2D DCT-II on `N×N` blocks and multi-spectral channel extraction.
//!
//! The 1D basis row `u` is `c(u)·cos((2x+1)uπ/(2N))` with `c(0) = √(1/N)` and
//! `c(u>0) = √(2/N)`. A block `f` indexed `[x][y]` transforms separably as
//! `F = B · f · Bᵀ`, so `F[u][v]` pairs `u` with rows and `v` with columns.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Block sizes the network accepts for its frequency branch.
pub const SUPPORTED_BLOCK_SIZES: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    n: usize,
    basis1d: Tensor,
}

impl DctBasis {
    pub fn size(&self) -> usize {
        self.n
    }

    /// The `N×N` matrix with entry `[u][x]`.
    pub fn matrix(&self) -> &Tensor {
        &self.basis1d
    }

    pub fn entry(&self, u: usize, x: usize) -> f64 {
        self.basis1d.data()[u * self.n + x]
    }

    /// The 2D basis function for `(u, v)` as a row-major `N×N` map, compensation included.
    pub fn pattern(&self, u: usize, v: usize) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(n * n);
        for x in 0..n {
            for y in 0..n {
                out.push(self.entry(u, x) * self.entry(v, y));
            }
        }
        out
    }

    /// Test hook: copy of the basis with one entry multiplied by `factor`.
    pub fn with_scaled_entry(&self, u: usize, x: usize, factor: f64) -> DctBasis {
        let mut b = self.clone();
        b.basis1d.data_mut()[u * self.n + x] *= factor;
        b
    }

    /// `max |B·Bᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let bt = ops::transpose_last2(&self.basis1d).unwrap();
        let prod = ops::matmul(&self.basis1d, &bt).unwrap();
        prod.max_abs_diff(&Tensor::eye(self.n))
    }
}

pub fn compensation(u: usize, n: usize) -> f64 {
    if u == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

pub fn make_basis(n: usize) -> Result<DctBasis> {
    if n == 0 {
        return Err(Error::InvalidSize("DCT block size must be ≥ 1".into()));
    }
    let nf = n as f64;
    let basis1d = Tensor::from_fn(&[n, n], |i| {
        let (u, x) = (i / n, i % n);
        compensation(u, n) * ((2 * x + 1) as f64 * u as f64 * PI / (2.0 * nf)).cos()
    });
    Ok(DctBasis { n, basis1d })
}

fn check_block(t: &Tensor, basis: &DctBasis, op: &'static str) -> Result<()> {
    if t.shape() != [basis.n, basis.n] {
        return Err(Error::dim(op, t.shape(), &[basis.n, basis.n]));
    }
    Ok(())
}

pub fn dct2(block: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    check_block(block, basis, "dct2")?;
    let bt = ops::transpose_last2(&basis.basis1d)?;
    ops::matmul(&ops::matmul(&basis.basis1d, block)?, &bt)
}

pub fn idct2(spectrum: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    check_block(spectrum, basis, "idct2")?;
    let bt = ops::transpose_last2(&basis.basis1d)?;
    ops::matmul(&ops::matmul(&bt, spectrum)?, &basis.basis1d)
}

/// Mapping from channel-group index to its frequency pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyAssignment {
    pub n_block: usize,
    pub order: Vec<(usize, usize)>,
}

impl FrequencyAssignment {
    /// Number of frequency components.
    pub fn components(&self) -> usize {
        self.order.len()
    }
}

/// JPEG zigzag traversal of the `N×N` grid as `(u, v)` pairs.
pub fn zigzag_order(n: usize) -> FrequencyAssignment {
    let mut order = Vec::with_capacity(n * n);
    if n > 0 {
        for s in 0..=2 * (n - 1) {
            let lo = s.saturating_sub(n - 1);
            let hi = s.min(n - 1);
            if s % 2 == 0 {
                order.extend((lo..=hi).rev().map(|u| (u, s - u)));
            } else {
                order.extend((lo..=hi).map(|u| (u, s - u)));
            }
        }
    }
    FrequencyAssignment { n_block: n, order }
}

/// Length-`C` vector of per-channel DCT responses, `n` consecutive groups of `C/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectralVector {
    pub values: Vec<f64>,
    pub groups: usize,
}

impl MultiSpectralVector {
    pub fn new(values: Vec<f64>, groups: usize) -> Result<Self> {
        if groups == 0 || !values.len().is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "channel count C={} is not divisible by n={groups}",
                values.len()
            )));
        }
        Ok(Self { values, groups })
    }

    pub fn group_size(&self) -> usize {
        self.values.len() / self.groups
    }

    pub fn group_of(&self, k: usize) -> usize {
        k / self.group_size()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.values.len()], self.values.clone()).unwrap()
    }
}

/// One `N×N` filter per channel: the basis pattern of the channel's group frequency.
pub fn channel_filters(
    channels: usize,
    assignment: &FrequencyAssignment,
    basis: &DctBasis,
) -> Result<Vec<f64>> {
    let n = assignment.components();
    if assignment.n_block != basis.n {
        return Err(Error::Config(format!(
            "assignment is for N={} but basis has N={}",
            assignment.n_block, basis.n
        )));
    }
    if n == 0 || !channels.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "channel count C={channels} is not divisible by n={n}"
        )));
    }
    let group = channels / n;
    let mut filters = Vec::with_capacity(channels * basis.n * basis.n);
    for k in 0..channels {
        let (u, v) = assignment.order[k / group];
        filters.extend(basis.pattern(u, v));
    }
    Ok(filters)
}

/// Tape form of the extraction: `[.., C, H, W] → [.., C]`.
pub fn multispectral_extract_var(
    tape: &mut Tape,
    features: Var,
    assignment: &FrequencyAssignment,
    basis: &DctBasis,
) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    let (_, c, _, _) = ops::split_nchw(&shape, "multispectral_extract")?;
    let filters = channel_filters(c, assignment, basis)?;
    let pooled = tape.adaptive_avg_pool(features, basis.n, basis.n)?;
    tape.channel_project(pooled, filters)
}

/// Pools a `C×H×W` feature map to `N×N` and keeps, for each channel in group `i`,
/// the DCT coefficient at the group's assigned `(u_i, v_i)`.
pub fn multispectral_extract(
    features: &Tensor,
    assignment: &FrequencyAssignment,
    basis: &DctBasis,
) -> Result<MultiSpectralVector> {
    if features.rank() != 3 {
        return Err(Error::dim("multispectral_extract", features.shape(), &[0, 0, 0]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let v = multispectral_extract_var(&mut tape, x, assignment, basis)?;
    MultiSpectralVector::new(tape.value(v).data().to_vec(), assignment.components())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    /// Direct quadruple-loop evaluation of the 2D DCT definition.
    fn dct2_oracle(f: &Tensor, n: usize) -> Tensor {
        let nf = n as f64;
        Tensor::from_fn(&[n, n], |i| {
            let (u, v) = (i / n, i % n);
            let mut s = 0.0;
            for x in 0..n {
                for y in 0..n {
                    let b = ((2 * x + 1) as f64 * u as f64 * PI / (2.0 * nf)).cos()
                        * ((2 * y + 1) as f64 * v as f64 * PI / (2.0 * nf)).cos();
                    s += f.at(&[x, y]) * b;
                }
            }
            compensation(u, n) * compensation(v, n) * s
        })
    }

    #[test]
    fn basis_small_cases() {
        assert_eq!(make_basis(1).unwrap().matrix().data(), &[1.0]);
        let b = make_basis(8).unwrap();
        for x in 0..8 {
            assert!((b.entry(0, x) - (1.0f64 / 8.0).sqrt()).abs() < 1e-15);
        }
        assert!(make_basis(0).is_err());
    }

    #[test]
    fn basis_orthonormal() {
        for n in [2, 4, 8, 16, 32] {
            assert!(make_basis(n).unwrap().orthonormality_error() < 1e-12, "N={n}");
        }
    }

    #[test]
    fn constant_and_zero_blocks() {
        let b = make_basis(8).unwrap();
        let f = dct2(&Tensor::full(&[8, 8], 1.0), &b).unwrap();
        assert!((f.at(&[0, 0]) - 8.0).abs() < 1e-12);
        for (i, v) in f.data().iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-12, "entry {i} = {v}");
        }
        assert!(dct2(&Tensor::zeros(&[8, 8]), &b).unwrap().data().iter().all(|v| *v == 0.0));

        let mut spec = Tensor::zeros(&[8, 8]);
        spec.set(&[0, 0], 8.0);
        let back = idct2(&spec, &b).unwrap();
        assert!(back.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(idct2(&Tensor::zeros(&[8, 8]), &b).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn delta_block_matches_quadruple_loop() {
        let b = make_basis(8).unwrap();
        let mut f = Tensor::zeros(&[8, 8]);
        f.set(&[3, 2], 1.0);
        let got = dct2(&f, &b).unwrap();
        assert!(got.max_abs_diff(&dct2_oracle(&f, 8)) < 1e-12);
    }

    #[test]
    fn random_round_trip_parseval_linearity() {
        let b = make_basis(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut rand_block = || Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x = rand_block();
            let spec = dct2(&x, &b).unwrap();
            worst = worst.max(idct2(&spec, &b).unwrap().max_abs_diff(&x));
            let e1: f64 = x.data().iter().map(|v| v * v).sum();
            let e2: f64 = spec.data().iter().map(|v| v * v).sum();
            assert!((e1 - e2).abs() / e1 < 1e-9);
            assert!(spec.max_abs_diff(&dct2_oracle(&x, 8)) < 1e-12);
        }
        assert!(worst < 1e-9);

        let (x, y) = (rand_block(), rand_block());
        let (a, c) = (1.7, -0.3);
        let mix = Tensor::from_fn(&[8, 8], |i| a * x.data()[i] + c * y.data()[i]);
        let (fx, fy) = (dct2(&x, &b).unwrap(), dct2(&y, &b).unwrap());
        let lin = Tensor::from_fn(&[8, 8], |i| a * fx.data()[i] + c * fy.data()[i]);
        assert!(dct2(&mix, &b).unwrap().max_abs_diff(&lin) < 1e-10);
    }

    #[test]
    fn size_mismatch() {
        let b = make_basis(4).unwrap();
        assert!(matches!(dct2(&Tensor::zeros(&[8, 8]), &b), Err(Error::Dimension { .. })));
        assert!(idct2(&Tensor::zeros(&[4, 3]), &b).is_err());
    }

    #[test]
    fn zigzag_cases() {
        assert_eq!(zigzag_order(1).order, vec![(0, 0)]);
        assert_eq!(zigzag_order(2).order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let z = zigzag_order(8);
        assert_eq!(&z.order[..6], &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        assert_eq!(z.order[63], (7, 7));
        let set: HashSet<_> = z.order.iter().copied().collect();
        let full: HashSet<_> = (0..8).flat_map(|u| (0..8).map(move |v| (u, v))).collect();
        assert_eq!(z.order.len(), 64);
        assert_eq!(set, full);
    }

    #[test]
    fn extract_constant_map() {
        let b = make_basis(8).unwrap();
        let z = zigzag_order(8);
        let v = multispectral_extract(&Tensor::full(&[128, 12, 12], 0.25), &z, &b).unwrap();
        for (k, &val) in v.values.iter().enumerate() {
            let expect = if k < 2 { 8.0 * 0.25 } else { 0.0 };
            assert!((val - expect).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn extract_matching_patterns_gives_ones() {
        let b = make_basis(4).unwrap();
        let z = zigzag_order(4);
        let mut data = Vec::new();
        for &(u, v) in &z.order {
            data.extend(b.pattern(u, v));
        }
        let f = Tensor::new(&[16, 4, 4], data).unwrap();
        let v = multispectral_extract(&f, &z, &b).unwrap();
        assert!(v.values.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn extract_matches_full_spectrum_gather() {
        let b = make_basis(8).unwrap();
        let z = zigzag_order(8);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let f = Tensor::from_fn(&[128, 16, 16], |_| rng.gen_range(-1.0..1.0));
        let got = multispectral_extract(&f, &z, &b).unwrap();
        let pooled = ops::adaptive_avg_pool(&f, 8, 8).unwrap();
        for k in 0..128 {
            let plane = Tensor::new(&[8, 8], pooled.data()[k * 64..(k + 1) * 64].to_vec()).unwrap();
            let spec = dct2_oracle(&plane, 8);
            let (u, v) = z.order[k / 2];
            assert!((got.values[k] - spec.at(&[u, v])).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_rejects_indivisible_channels() {
        let b = make_basis(8).unwrap();
        let err = multispectral_extract(&Tensor::zeros(&[100, 8, 8]), &zigzag_order(8), &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("C=100") && msg.contains("n=64"), "{msg}");
    }
}
