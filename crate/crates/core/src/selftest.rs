//! Built-in numerical checks: DCT identities and gradient checks over every
//! differentiable building block, each reported with its worst error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape};
use crate::dct::{dct2, idct2, make_basis, DctBasis};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::nn::{lfe_forward, seg_losses_var, sff_forward, LabelMap, LfeParams, LossConfig, SffParams, SpatialProjection};
use crate::tensor::Tensor;
use crate::toynet::train::batch_loss_var;
use crate::toynet::synth::scene_rng;
use crate::toynet::{synth_dataset, DataSpec, Style, SynthScene, ToyNet, ToyNetConfig, Variant};

pub const IDENTITY_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.threshold
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "ok" } else { "FAIL" };
        format!("{status:<4} {:<28} max_error={:.3e} threshold={:.0e}", self.name, self.error, self.threshold)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Scales one basis entry before the DCT checks so they must fail.
    pub break_dct: bool,
}

/// Independent fixture stream per check, so checks do not share random draws.
fn fixture_rng(seed: u64, check: u64) -> ChaCha8Rng {
    scene_rng(seed, 0, 0x5e1f_7e57 + check)
}

fn random_block(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0))
}

fn basis(n: usize, opts: SelftestOptions) -> Result<DctBasis> {
    let b = make_basis(n)?;
    Ok(if opts.break_dct { b.with_scaled_entry(1, 0, 1.01) } else { b })
}

/// `max |x − idct2(dct2(x))|` over `blocks` random `n×n` blocks.
pub fn dct_round_trip_error(b: &DctBasis, blocks: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..blocks {
        let x = random_block(&mut rng, b.size());
        worst = worst.max(idct2(&dct2(&x, b)?, b)?.max_abs_diff(&x));
    }
    Ok(worst)
}

/// `max |Σx² − ΣF²| / Σx²` over random blocks.
pub fn dct_parseval_error(b: &DctBasis, blocks: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..blocks {
        let x = random_block(&mut rng, b.size());
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let ef: f64 = dct2(&x, b)?.data().iter().map(|v| v * v).sum();
        worst = worst.max((ex - ef).abs() / ex);
    }
    Ok(worst)
}

pub fn grad_check_lfe(seed: u64) -> Result<GradCheckReport> {
    let (c, n) = (128, 64);
    let mut rng = fixture_rng(seed, 1);
    let mut store = ParamStore::new();
    let p = LfeParams::register(&mut store, "lfe", c, n)?;
    p.randomize(&mut store, &mut rng, 1.0);
    store.get_mut(p.gamma).value.data_mut()[0] = rng.gen_range(0.5..1.5);
    let v = Tensor::from_fn(&[c], |_| rng.gen_range(-2.0..2.0));
    let ids = [p.lfcc_weight, p.gamma];
    grad_check(&mut store, &ids, DEFAULT_EPS, |s, t| {
        let x = t.constant(v.clone());
        let (out, _) = lfe_forward(t, s, x, &p)?;
        let sq = t.mul(out, out)?;
        Ok(t.sum(sq))
    })
}

pub fn grad_check_sff(seed: u64) -> Result<GradCheckReport> {
    let (ctx_ch, freq_ch, out, hw) = (6, 8, 8, 3);
    let mut rng = fixture_rng(seed, 2);
    let mut store = ParamStore::new();
    let sp = SpatialProjection::register(&mut store, "proj_s", ctx_ch, out, &mut rng);
    let p = SffParams::register(&mut store, "sff", &sp, freq_ch, &mut rng);
    for id in [p.proj_s_bias, p.proj_f_bias] {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    store.get_mut(p.alpha).value.data_mut()[0] = rng.gen_range(0.3..1.0);
    let ctx = Tensor::from_fn(&[ctx_ch, hw, hw], |_| rng.gen_range(-0.5..0.5));
    let v = Tensor::from_fn(&[freq_ch], |_| rng.gen_range(-0.5..0.5));
    let probe = Tensor::from_fn(&[out, hw, hw], |_| rng.gen_range(-1.0..1.0));
    let ids: Vec<_> = store.ids().collect();
    grad_check(&mut store, &ids, DEFAULT_EPS, |s, t| {
        let c = t.constant(ctx.clone());
        let vv = t.constant(v.clone());
        let y = sff_forward(t, s, c, vv, &p)?;
        let pr = t.constant(probe.clone());
        let m = t.mul(y, pr)?;
        Ok(t.sum(m))
    })
}

pub fn grad_check_losses(seed: u64) -> Result<GradCheckReport> {
    let (k, h, w) = (3, 6, 6);
    let mut rng = fixture_rng(seed, 3);
    let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k as u8)).collect())?;
    let mut store = ParamStore::new();
    let id = store.add("logits", Tensor::from_fn(&[k, h, w], |_| rng.gen_range(-2.0..2.0)));
    let cfg = LossConfig { ohem_enabled: false, lambda2: 0.3, ..LossConfig::default() };
    grad_check(&mut store, &[id], DEFAULT_EPS, |s, t| {
        let x = t.param(s, id);
        Ok(seg_losses_var(t, x, &labels, &cfg)?.total)
    })
}

/// A miniature learnable-frequency network with every parameter live: positive
/// biases keep ReLUs away from their kink and `α = 1` routes gradient through
/// the fusion branch.
pub fn net_grad_fixture(seed: u64) -> Result<(ToyNet, Vec<SynthScene>, LossConfig)> {
    let cfg = ToyNetConfig {
        input_size: 16,
        widths: [4, 4, 8],
        ppm_channels: 2,
        context_channels: 8,
        fusion_channels: 8,
        dct_block: 2,
        classes: 3,
        variant: Variant::Fdl,
        ..ToyNetConfig::default()
    };
    let mut net = ToyNet::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        if net.store.name(id).ends_with(".bias") {
            for v in net.store.get_mut(id).value.data_mut() {
                *v = rng.gen_range(0.02..0.2);
            }
        }
    }
    if let Some(a) = net.alpha() {
        net.store.get_mut(a).value.data_mut()[0] = 1.0;
    }
    let data = synth_dataset(&DataSpec { style: Style::Night, seed, count: 2, start: 0 }, cfg.input_size, cfg.classes)?;
    let loss = LossConfig { ohem_enabled: false, ..LossConfig::default() };
    Ok((net, data, loss))
}

/// Gradient check of the mean total loss over a 2-image batch through the whole network.
pub fn grad_check_net(seed: u64) -> Result<GradCheckReport> {
    let (net, data, loss) = net_grad_fixture(seed)?;
    let refs: Vec<&SynthScene> = data.iter().collect();
    let mut store = net.store.clone();
    let ids: Vec<_> = store.ids().collect();
    grad_check(&mut store, &ids, DEFAULT_EPS, |s, t: &mut Tape| batch_loss_var(&net, t, s, &refs, &loss))
}

fn gradient_result(name: &str, r: Result<GradCheckReport>) -> CheckResult {
    CheckResult {
        name: name.into(),
        error: r.map(|r| r.max_relative_error).unwrap_or(f64::INFINITY),
        threshold: GRADIENT_TOL,
    }
}

pub fn run_selftest(opts: SelftestOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for n in [2, 4, 8, 16] {
        out.push(CheckResult {
            name: format!("dct_orthonormality_n{n}"),
            error: basis(n, opts)?.orthonormality_error(),
            threshold: IDENTITY_TOL,
        });
    }
    let b8 = basis(8, opts)?;
    out.push(CheckResult {
        name: "dct_round_trip_n8".into(),
        error: dct_round_trip_error(&b8, 100, opts.seed)?,
        threshold: IDENTITY_TOL,
    });
    out.push(CheckResult {
        name: "dct_parseval_n8".into(),
        error: dct_parseval_error(&b8, 100, opts.seed)?,
        threshold: IDENTITY_TOL,
    });
    out.push(gradient_result("grad_lfe", grad_check_lfe(opts.seed)));
    out.push(gradient_result("grad_sff", grad_check_sff(opts.seed)));
    out.push(gradient_result("grad_seg_losses", grad_check_losses(opts.seed)));
    out.push(gradient_result("grad_toy_net", grad_check_net(opts.seed)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_basis_fails_orthonormality() {
        let opts = SelftestOptions { seed: 0, break_dct: true };
        let b = basis(8, opts).unwrap();
        assert!(b.orthonormality_error() > 1e-3);
        assert!(dct_round_trip_error(&b, 3, 0).unwrap() > IDENTITY_TOL);
    }

    #[test]
    fn dct_identities_hold() {
        let b = make_basis(8).unwrap();
        assert!(dct_round_trip_error(&b, 100, 1).unwrap() < 1e-12);
        assert!(dct_parseval_error(&b, 100, 1).unwrap() < 1e-12);
    }

    #[test]
    fn module_gradients_over_three_seeds() {
        for seed in 0..3 {
            for (name, r) in [
                ("lfe", grad_check_lfe(seed)),
                ("sff", grad_check_sff(seed)),
                ("losses", grad_check_losses(seed)),
            ] {
                let r = r.unwrap();
                assert!(r.max_relative_error < GRADIENT_TOL, "{name} seed {seed}: {r:?}");
            }
        }
    }
}
