//! Spatial-Frequency Fusion.
//!
//! `R_s` is a `1×1` projection of the context features and `R_f` a `1×1` projection
//! of the reweighted frequency vector, broadcast over every spatial position. With
//! both flattened to `C′×D`, the affinity is `A = softmax_i(R_s · R_fᵀ)` (each column
//! of `A` sums to one) and the output is `α · (A · R_s) + R_s`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SffParams {
    pub proj_s_weight: ParamId,
    pub proj_s_bias: ParamId,
    pub proj_f_weight: ParamId,
    pub proj_f_bias: ParamId,
    pub alpha: ParamId,
    pub out_channels: usize,
}

pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// The context projection alone. Shared by every network variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_channels: usize,
}

impl SpatialProjection {
    pub fn register(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{prefix}.weight"), he_normal(rng, &[out_ch, in_ch], in_ch, 2.0));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
        Self { weight, bias, out_channels: out_ch }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, context: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1x1(context, w, Some(b))
    }
}

impl SffParams {
    /// Registers the frequency projection and `α` (initialised to 0) on top of an
    /// existing spatial projection.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spatial: &SpatialProjection,
        freq_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let out = spatial.out_channels;
        let proj_f_weight = store.add(
            format!("{prefix}.proj_f.weight"),
            he_normal(rng, &[out, freq_channels], freq_channels, 1.0),
        );
        let proj_f_bias = store.add(format!("{prefix}.proj_f.bias"), Tensor::zeros(&[out]));
        let alpha = store.add(format!("{prefix}.alpha"), Tensor::scalar(0.0));
        Self {
            proj_s_weight: spatial.weight,
            proj_s_bias: spatial.bias,
            proj_f_weight,
            proj_f_bias,
            alpha,
            out_channels: out,
        }
    }

    pub fn spatial(&self) -> SpatialProjection {
        SpatialProjection {
            weight: self.proj_s_weight,
            bias: self.proj_s_bias,
            out_channels: self.out_channels,
        }
    }
}

/// Fuses `R_s` (already projected, `[C′, h, w]` or `[B, C′, h, w]`) with the frequency
/// vector `v` (`[C]` or `[B, C]`).
pub fn sff_fuse(tape: &mut Tape, store: &ParamStore, r_s: Var, v: Var, p: &SffParams) -> Result<Var> {
    let s_shape = tape.shape(r_s).to_vec();
    let unbatched = s_shape.len() == 3;
    let (batch, cs, h, w) = match s_shape.as_slice() {
        [c, h, w] => (1, *c, *h, *w),
        [b, c, h, w] => (*b, *c, *h, *w),
        _ => return Err(Error::dim("sff", &s_shape, &[0, 0, 0])),
    };
    let vc = match tape.shape(v) {
        [c] if unbatched => *c,
        [b, c] if *b == batch && !unbatched => *c,
        other => return Err(Error::dim("sff", &s_shape, other)),
    };
    let f_out = store.value(p.proj_f_weight).shape()[0];
    if cs != p.out_channels || f_out != cs {
        return Err(Error::Config(format!(
            "projection channel mismatch: spatial {cs}, frequency {f_out}, configured {}",
            p.out_channels
        )));
    }
    let d = h * w;

    let v4 = tape.reshape(v, &[batch, vc, 1, 1])?;
    let wf = tape.param(store, p.proj_f_weight);
    let bf = tape.param(store, p.proj_f_bias);
    let r_f = tape.conv1x1(v4, wf, Some(bf))?;
    let r_f = tape.expand(r_f, &[batch, cs, h, w])?;

    let rs_flat = tape.reshape(r_s, &[batch, cs, d])?;
    let rf_flat = tape.reshape(r_f, &[batch, cs, d])?;
    let rf_t = tape.transpose(rf_flat)?;
    let scores = tape.matmul(rs_flat, rf_t)?;
    let affinity = tape.softmax(scores, 1)?;
    let mixed = tape.matmul(affinity, rs_flat)?;
    let mixed = tape.reshape(mixed, &[batch, cs, h, w])?;

    let alpha = tape.param(store, p.alpha);
    let alpha = tape.reshape(alpha, &[1, 1, 1, 1])?;
    let alpha = tape.expand(alpha, &[batch, cs, h, w])?;
    let scaled = tape.mul(alpha, mixed)?;
    let rs4 = tape.reshape(r_s, &[batch, cs, h, w])?;
    let out = tape.add(scaled, rs4)?;
    tape.reshape(out, &s_shape)
}

/// Projects `context` to `R_s` and fuses it with `v_freq_prime`.
pub fn sff_forward(tape: &mut Tape, store: &ParamStore, context: Var, v_freq_prime: Var, p: &SffParams) -> Result<Var> {
    let r_s = p.spatial().forward(tape, store, context)?;
    sff_fuse(tape, store, r_s, v_freq_prime, p)
}

/// The `C′×C′` affinity matrix for a single sample, for inspection.
pub fn affinity(r_s: &Tensor, r_f: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(r_s.clone());
    let f = tape.constant(r_f.clone());
    let ft = tape.transpose(f)?;
    let scores = tape.matmul(s, ft)?;
    let a = tape.softmax(scores, 0)?;
    Ok(tape.value(a).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        p: SffParams,
        ctx: Tensor,
        v: Tensor,
    }

    fn fixture(seed: u64, ctx_ch: usize, freq_ch: usize, out: usize, hw: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sp = SpatialProjection::register(&mut store, "proj_s", ctx_ch, out, &mut rng);
        let p = SffParams::register(&mut store, "sff", &sp, freq_ch, &mut rng);
        for id in [p.proj_s_bias, p.proj_f_bias] {
            for v in store.get_mut(id).value.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let ctx = Tensor::from_fn(&[ctx_ch, hw, hw], |_| rng.gen_range(-0.5..0.5));
        let v = Tensor::from_fn(&[freq_ch], |_| rng.gen_range(-0.5..0.5));
        Fixture { store, p, ctx, v }
    }

    fn run(f: &Fixture) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let c = tape.constant(f.ctx.clone());
        let v = tape.constant(f.v.clone());
        let r_s = f.p.spatial().forward(&mut tape, &f.store, c).unwrap();
        let out = sff_fuse(&mut tape, &f.store, r_s, v, &f.p).unwrap();
        (tape.value(r_s).clone(), tape.value(out).clone())
    }

    #[test]
    fn alpha_zero_is_identity_bitwise() {
        let f = fixture(1, 12, 16, 16, 4);
        let (r_s, out) = run(&f);
        assert_eq!(r_s, out);
    }

    #[test]
    fn zero_spatial_stays_zero() {
        let mut f = fixture(2, 12, 16, 16, 4);
        f.ctx = Tensor::zeros(f.ctx.shape());
        f.store.get_mut(f.p.proj_s_bias).value.data_mut().fill(0.0);
        f.store.get_mut(f.p.alpha).value.data_mut()[0] = 0.7;
        let (_, out) = run(&f);
        assert!(out.data().iter().all(|&v| v == 0.0));
        let a = affinity(&Tensor::zeros(&[16, 16]), &Tensor::full(&[16, 16], 0.3)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn matches_explicit_loop_oracle() {
        let mut f = fixture(3, 12, 16, 16, 4);
        f.store.get_mut(f.p.alpha).value.data_mut()[0] = 0.4;
        let (r_s, out) = run(&f);
        let (c, d) = (16, 16);
        let wf = f.store.value(f.p.proj_f_weight);
        let bf = f.store.value(f.p.proj_f_bias);
        let rf: Vec<f64> = (0..c)
            .map(|j| bf.data()[j] + (0..16).map(|k| wf.at(&[j, k]) * f.v.data()[k]).sum::<f64>())
            .collect();
        let rs = r_s.data();
        // A(i, j) = exp(R_s^i · R_f^j) / Σ_i exp(...)
        let mut a = vec![vec![0.0; c]; c];
        for j in 0..c {
            let dots: Vec<f64> = (0..c)
                .map(|i| (0..d).map(|p| rs[i * d + p] * rf[j]).sum())
                .collect();
            let z: f64 = dots.iter().map(|x| x.exp()).sum();
            for i in 0..c {
                a[i][j] = dots[i].exp() / z;
            }
        }
        for i in 0..c {
            for p in 0..d {
                let mixed: f64 = (0..c).map(|j| a[i][j] * rs[j * d + p]).sum();
                let expect = 0.4 * mixed + rs[i * d + p];
                assert!((out.data()[i * d + p] - expect).abs() < 1e-12);
            }
        }
        for j in 0..c {
            let s: f64 = (0..c).map(|i| a[i][j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rs = Tensor::from_fn(&[8, 20], |_| rng.gen_range(-1.0..1.0));
        let rf = Tensor::from_fn(&[8, 20], |_| rng.gen_range(-1.0..1.0));
        let a = affinity(&rs, &rf).unwrap();
        for j in 0..8 {
            let s: f64 = (0..8).map(|i| a.at(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let f = fixture(5, 12, 16, 16, 4);
        let mut tape = Tape::new();
        let r_s = tape.constant(Tensor::zeros(&[8, 4, 4]));
        let v = tape.constant(f.v.clone());
        assert!(matches!(sff_fuse(&mut tape, &f.store, r_s, v, &f.p), Err(Error::Config(_))));
    }

    #[test]
    fn grad_check_all_parameters() {
        for seed in 0..3 {
            let mut f = fixture(10 + seed, 6, 8, 8, 3);
            f.store.get_mut(f.p.alpha).value.data_mut()[0] = 0.6;
            let (ctx, v, p) = (f.ctx.clone(), f.v.clone(), f.p.clone());
            let ids: Vec<_> = f.store.ids().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = Tensor::from_fn(&[8, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let r = grad_check(&mut f.store, &ids, DEFAULT_EPS, |s, t| {
                let c = t.constant(ctx.clone());
                let vv = t.constant(v.clone());
                let out = sff_forward(t, s, c, vv, &p)?;
                let pr = t.constant(probe.clone());
                let m = t.mul(out, pr)?;
                Ok(t.sum(m))
            })
            .unwrap();
            assert!(r.max_relative_error < 1e-5, "seed {seed}: {r:?}");
        }
    }
}
