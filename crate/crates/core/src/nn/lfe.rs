//! Learnable Frequency Encoder.
//!
//! The length-`C` multi-spectral vector is viewed as `n` groups of `C/n` channels.
//! A shared `1×1` convolution maps every group to one score, the scores are
//! normalised across the `n` groups of the sample, and a softmax over groups yields
//! the component weights. Each group is then rescaled by its weight.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::dct::MultiSpectralVector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LfeParams {
    pub n: usize,
    pub group_size: usize,
    /// `[1, group_size]`, no bias.
    pub lfcc_weight: ParamId,
    /// `[1]`, scale of the group normalisation.
    pub gamma: ParamId,
}

impl LfeParams {
    /// Registers the encoder's parameters. The convolution starts as a group average.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, n: usize) -> Result<Self> {
        check_groups(channels, n)?;
        let group_size = channels / n;
        let lfcc_weight = store.add(
            format!("{prefix}.lfcc.weight"),
            Tensor::full(&[1, group_size], 1.0 / group_size as f64),
        );
        let gamma = store.add(format!("{prefix}.norm.gamma"), Tensor::scalar(1.0));
        Ok(Self { n, group_size, lfcc_weight, gamma })
    }

    /// Re-draws the convolution weights uniformly in `[-a, a]`.
    pub fn randomize(&self, store: &mut ParamStore, rng: &mut impl Rng, a: f64) {
        for v in store.get_mut(self.lfcc_weight).value.data_mut() {
            *v = rng.gen_range(-a..a);
        }
    }
}

fn check_groups(channels: usize, n: usize) -> Result<()> {
    if n == 0 || !channels.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "channel count C={channels} is not divisible by n={n}"
        )));
    }
    Ok(())
}

/// Group normalisation used by the encoder: statistics over the `n` entries of one
/// sample, `x` shaped `[n, 1, 1, 1]`, then `γ·x̂ + β`.
pub fn normalize_groups(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.is_empty() || shape[1..].iter().any(|&d| d != 1) {
        return Err(Error::dim("normalize_groups", &shape, &[shape.first().copied().unwrap_or(0), 1, 1, 1]));
    }
    let flat = tape.reshape(x, &[1, shape[0]])?;
    let y = tape.normalize_last(flat, gamma, beta, eps)?;
    tape.reshape(y, &shape)
}

/// Pre-softmax group scores `[B, n]` for `v` shaped `[C]` or `[B, C]`.
fn group_scores(tape: &mut Tape, store: &ParamStore, v: Var, p: &LfeParams) -> Result<Var> {
    let (batch, c) = batch_and_channels(tape.shape(v))?;
    if c != p.n * p.group_size {
        return Err(Error::Config(format!(
            "encoder built for C={} but got C={c}",
            p.n * p.group_size
        )));
    }
    let grouped = tape.reshape(v, &[batch * p.n, p.group_size, 1, 1])?;
    let w = tape.param(store, p.lfcc_weight);
    let conv = tape.conv1x1(grouped, w, None)?;
    let rows = tape.reshape(conv, &[batch, p.n])?;
    let gamma = tape.param(store, p.gamma);
    let beta = tape.constant(Tensor::scalar(0.0));
    tape.normalize_last(rows, gamma, beta, NORM_EPS)
}

fn batch_and_channels(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [c] => Ok((1, *c)),
        [b, c] => Ok((*b, *c)),
        _ => Err(Error::dim("lfe", shape, &[0])),
    }
}

/// Rescales every group of `v` (`[C]` or `[B, C]`) by `weights` (`[n]` or `[B, n]`).
pub fn scale_groups(tape: &mut Tape, v: Var, weights: Var) -> Result<Var> {
    let vshape = tape.shape(v).to_vec();
    let (batch, c) = batch_and_channels(&vshape)?;
    let (_, n) = batch_and_channels(tape.shape(weights))?;
    check_groups(c, n)?;
    let gs = c / n;
    let w3 = tape.reshape(weights, &[batch, n, 1])?;
    let wx = tape.expand(w3, &[batch, n, gs])?;
    let v3 = tape.reshape(v, &[batch, n, gs])?;
    let out = tape.mul(wx, v3)?;
    tape.reshape(out, &vshape)
}

/// Softmax over the group axis of `[B, n]` scores.
pub fn weights_from_scores(tape: &mut Tape, scores: Var) -> Result<Var> {
    let axis = tape.shape(scores).len() - 1;
    tape.softmax(scores, axis)
}

/// Returns `(v′, weights)`: the reweighted vector and the `n` component weights.
pub fn lfe_forward(tape: &mut Tape, store: &ParamStore, v: Var, p: &LfeParams) -> Result<(Var, Var)> {
    let unbatched = tape.shape(v).len() == 1;
    let scores = group_scores(tape, store, v, p)?;
    let mut weights = weights_from_scores(tape, scores)?;
    if unbatched {
        weights = tape.reshape(weights, &[p.n])?;
    }
    let out = scale_groups(tape, v, weights)?;
    Ok((out, weights))
}

/// Plain-value form of [`lfe_forward`].
pub fn lfe_apply(
    store: &ParamStore,
    p: &LfeParams,
    v: &MultiSpectralVector,
) -> Result<(MultiSpectralVector, Vec<f64>)> {
    check_groups(v.values.len(), p.n)?;
    let mut tape = Tape::new();
    let x = tape.constant(v.to_tensor());
    let (out, w) = lfe_forward(&mut tape, store, x, p)?;
    Ok((
        MultiSpectralVector::new(tape.value(out).data().to_vec(), p.n)?,
        tape.value(w).data().to_vec(),
    ))
}

/// How the frequency branch weights its components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrequencyMode {
    /// Weights predicted per image by the encoder.
    Learnable,
    /// Unit weight on the `k` lowest zigzag components, zero elsewhere.
    TopK(usize),
    /// Unit weight on every component.
    StaticAll,
}

/// Fixed per-group weights for the non-learnable modes.
pub fn fixed_weights(mode: FrequencyMode, n: usize) -> Result<Vec<f64>> {
    match mode {
        FrequencyMode::StaticAll => Ok(vec![1.0; n]),
        FrequencyMode::TopK(k) if (1..=n).contains(&k) => {
            Ok((0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect())
        }
        FrequencyMode::TopK(k) => Err(Error::Config(format!("top_k needs 1 ≤ k ≤ {n}, got {k}"))),
        FrequencyMode::Learnable => Err(Error::Config("learnable mode has no fixed weights".into())),
    }
}

/// Applies `mode` to `v` on the tape. `lfe` is required for [`FrequencyMode::Learnable`].
pub fn apply_frequency_mode(
    tape: &mut Tape,
    store: &ParamStore,
    v: Var,
    n: usize,
    mode: FrequencyMode,
    lfe: Option<&LfeParams>,
) -> Result<Var> {
    match mode {
        FrequencyMode::Learnable => {
            let p = lfe.ok_or_else(|| Error::Config("learnable mode needs encoder parameters".into()))?;
            Ok(lfe_forward(tape, store, v, p)?.0)
        }
        FrequencyMode::StaticAll => {
            fixed_weights(mode, n)?;
            Ok(v)
        }
        FrequencyMode::TopK(_) => {
            let (batch, _) = batch_and_channels(tape.shape(v))?;
            let w = fixed_weights(mode, n)?;
            let shape: Vec<usize> = if tape.shape(v).len() == 1 { vec![n] } else { vec![batch, n] };
            let w = tape.constant(Tensor::new(&shape, w.repeat(batch))?);
            scale_groups(tape, v, w)
        }
    }
}

/// Plain-value form of the fixed (non-learnable) variants.
pub fn lfe_variant(v: &MultiSpectralVector, mode: FrequencyMode) -> Result<MultiSpectralVector> {
    let w = fixed_weights(mode, v.groups)?;
    let gs = v.group_size();
    let values = v
        .values
        .iter()
        .enumerate()
        .map(|(k, &x)| w[k / gs] * x)
        .collect();
    MultiSpectralVector::new(values, v.groups)
}

/// CSV of component weights for heatmap plotting.
pub fn weights_csv(order: &[(usize, usize)], weights: &[f64]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("component_index,u,v,weight\n");
    for (i, (&(u, v), w)) in order.iter().zip(weights).enumerate() {
        writeln!(out, "{i},{u},{v},{w}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand_chacha::ChaCha8Rng;

    fn random_vector(c: usize, n: usize, seed: u64) -> MultiSpectralVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiSpectralVector::new((0..c).map(|_| rng.gen_range(-2.0..2.0)).collect(), n).unwrap()
    }

    #[test]
    fn zero_conv_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let p = LfeParams::register(&mut store, "lfe", 128, 64).unwrap();
        store.get_mut(p.lfcc_weight).value.data_mut().fill(0.0);
        let v = random_vector(128, 64, 1);
        let (out, w) = lfe_apply(&store, &p, &v).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 64.0).abs() < 1e-15));
        for (a, b) in out.values.iter().zip(&v.values) {
            assert!((a - b / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_group_zeroes_its_half() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let out = scale_groups(&mut tape, v, w).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let mut store = ParamStore::new();
        assert!(matches!(LfeParams::register(&mut store, "lfe", 100, 64), Err(Error::Config(_))));
    }

    #[test]
    fn variants() {
        let v = random_vector(128, 64, 2);
        assert_eq!(lfe_variant(&v, FrequencyMode::StaticAll).unwrap(), v);
        assert_eq!(lfe_variant(&v, FrequencyMode::TopK(64)).unwrap(), v);
        let top1 = lfe_variant(&v, FrequencyMode::TopK(1)).unwrap();
        assert_eq!(&top1.values[..2], &v.values[..2]);
        assert!(top1.values[2..].iter().all(|&x| x == 0.0));
        assert!(lfe_variant(&v, FrequencyMode::TopK(0)).is_err());
        assert!(lfe_variant(&v, FrequencyMode::TopK(65)).is_err());
    }

    #[test]
    fn grad_check_through_squared_output() {
        for seed in 0..3 {
            let mut store = ParamStore::new();
            let p = LfeParams::register(&mut store, "lfe", 128, 64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            p.randomize(&mut store, &mut rng, 1.0);
            store.get_mut(p.gamma).value.data_mut()[0] = 1.3;
            let v = random_vector(128, 64, seed);
            let ids = [p.lfcc_weight, p.gamma];
            let r = grad_check(&mut store, &ids, DEFAULT_EPS, |s, t| {
                let x = t.constant(v.to_tensor());
                let (out, _) = lfe_forward(t, s, x, &p)?;
                let sq = t.mul(out, out)?;
                Ok(t.sum(sq))
            })
            .unwrap();
            assert!(r.max_relative_error < 1e-5, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn normalize_groups_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[8, 1, 1, 1], 3.0));
        let g = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.0));
        let y = normalize_groups(&mut tape, x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![-1.0, 1.0]).unwrap());
        let b5 = tape.constant(Tensor::scalar(5.0));
        let y = normalize_groups(&mut tape, x, g, b5, 1e-14).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 4.0).abs() < 1e-9 && (d[1] - 6.0).abs() < 1e-9);

        let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        assert!(matches!(normalize_groups(&mut tape, x, g, b, 1e-5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weights_csv_layout() {
        let csv = weights_csv(&[(0, 0), (0, 1)], &[0.75, 0.25]);
        assert_eq!(csv, "component_index,u,v,weight\n0,0,0,0.75\n1,0,1,0.25\n");
    }

    proptest! {
        #[test]
        fn weights_on_simplex(seed in any::<u64>(), scale in 0.1f64..50.0) {
            let mut store = ParamStore::new();
            let p = LfeParams::register(&mut store, "lfe", 64, 16).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            p.randomize(&mut store, &mut rng, 2.0);
            store.get_mut(p.gamma).value.data_mut()[0] = scale;
            let v = random_vector(64, 16, seed ^ 0x5555);
            let (_, w) = lfe_apply(&store, &p, &v).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn score_shift_invariance(seed in any::<u64>(), shift in -30.0f64..30.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v = random_vector(32, 16, seed);
            let run = |offset: f64| {
                let mut tape = Tape::new();
                let s = tape.constant(Tensor::new(&[1, 16], scores.iter().map(|x| x + offset).collect()).unwrap());
                let w = weights_from_scores(&mut tape, s).unwrap();
                let x = tape.constant(Tensor::new(&[1, 32], v.values.clone()).unwrap());
                let out = scale_groups(&mut tape, x, w).unwrap();
                tape.value(out).clone()
            };
            prop_assert!(run(0.0).max_abs_diff(&run(shift)) < 1e-12);
        }
    }
}
