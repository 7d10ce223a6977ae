use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::dct::{make_basis, multispectral_extract_var, zigzag_order, DctBasis, FrequencyAssignment};
use crate::error::{Error, Result};
use crate::nn::lfe::{apply_frequency_mode, lfe_forward, LfeParams};
use crate::nn::sff::{he_normal, sff_fuse, SffParams, SpatialProjection};
use crate::ops::Conv2dGeom;
use crate::tensor::Tensor;

use super::config::{ToyNetConfig, Variant, OUTPUT_STRIDE};

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn register(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let weight = store.add(format!("{name}.weight"), he_normal(rng, shape, fan_in, 2.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&shape[..1]));
        Self { weight, bias }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, geom: Option<Conv2dGeom>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        match geom {
            Some(g) => tape.conv2d(x, w, Some(b), g),
            None => tape.conv1x1(x, w, Some(b)),
        }
    }
}

#[derive(Clone, Debug)]
struct FrequencyBranch {
    basis: DctBasis,
    assignment: FrequencyAssignment,
    lfe: Option<LfeParams>,
    sff: SffParams,
}

/// Everything a forward pass produces besides the logits.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub spatial: Var,
    pub frequency_weights: Option<Var>,
}

/// Backbone (output stride 8), mini pyramid pooling, optional frequency branch with
/// fusion, `1×1` head and bilinear upsampling back to the input size.
#[derive(Clone, Debug)]
pub struct ToyNet {
    pub cfg: ToyNetConfig,
    pub store: ParamStore,
    backbone: Vec<(Conv, Conv)>,
    ppm: Vec<Conv>,
    ppm_fuse: Conv,
    proj_s: SpatialProjection,
    head: Conv,
    freq: Option<FrequencyBranch>,
}

const SAME: Conv2dGeom = Conv2dGeom { stride: 1, padding: 1 };
const DOWN: Conv2dGeom = Conv2dGeom { stride: 2, padding: 1 };

impl ToyNet {
    /// Parameters shared by every variant are drawn first, so one seed yields the
    /// same shared weights whatever the variant.
    pub fn new(cfg: ToyNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut backbone = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let a = Conv::register(&mut store, &format!("backbone.{i}.conv"), &[w, cin, 3, 3], &mut rng);
            let b = Conv::register(&mut store, &format!("backbone.{i}.down"), &[w, w, 3, 3], &mut rng);
            backbone.push((a, b));
            cin = w;
        }
        let c = cfg.widths[2];
        let ppm = cfg
            .ppm_bins
            .iter()
            .map(|b| Conv::register(&mut store, &format!("context.ppm{b}"), &[cfg.ppm_channels, c], &mut rng))
            .collect::<Vec<_>>();
        let cat = c + cfg.ppm_channels * cfg.ppm_bins.len();
        let ppm_fuse = Conv::register(&mut store, "context.fuse", &[cfg.context_channels, cat], &mut rng);
        let proj_s = SpatialProjection::register(
            &mut store,
            "fusion.proj_s",
            cfg.context_channels,
            cfg.fusion_channels,
            &mut rng,
        );
        let head = Conv::register(&mut store, "head", &[cfg.classes, cfg.fusion_channels], &mut rng);

        let freq = match cfg.variant.frequency_mode() {
            None => None,
            Some(mode) => {
                let lfe = match mode {
                    crate::nn::FrequencyMode::Learnable => {
                        Some(LfeParams::register(&mut store, "frequency.lfe", c, cfg.components())?)
                    }
                    _ => None,
                };
                let sff = SffParams::register(&mut store, "fusion", &proj_s, c, &mut rng);
                Some(FrequencyBranch {
                    basis: make_basis(cfg.dct_block)?,
                    assignment: zigzag_order(cfg.dct_block),
                    lfe,
                    sff,
                })
            }
        };
        Ok(Self { cfg, store, backbone, ppm, ppm_fuse, proj_s, head, freq })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn alpha(&self) -> Option<ParamId> {
        self.freq.as_ref().map(|f| f.sff.alpha)
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }

    pub fn assignment(&self) -> Option<&FrequencyAssignment> {
        self.freq.as_ref().map(|f| &f.assignment)
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &ToyNet) -> usize {
        let mut copied = 0;
        for (_, name, p) in other.store.iter() {
            if let Some(mine) = self.store.find(name) {
                if self.store.value(mine).shape() == p.value.shape() {
                    self.store.get_mut(mine).value = p.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Builds the forward pass for `images` `[B, 3, H, W]` on `tape`, reading
    /// parameters from `store` (which must be laid out like `self.store`).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<ForwardVars> {
        let s = self.cfg.input_size;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Config(format!(
                "network expects [B, 3, {s}, {s}] input, got {shape:?}"
            )));
        }
        let mut x = images;
        for (a, b) in &self.backbone {
            x = a.apply(tape, store, x, Some(SAME))?;
            x = tape.relu(x);
            x = b.apply(tape, store, x, Some(DOWN))?;
            x = tape.relu(x);
        }
        let features = x;
        let fs = self.cfg.feature_size();

        let mut parts = vec![features];
        for (conv, &bin) in self.ppm.iter().zip(&self.cfg.ppm_bins) {
            let p = tape.adaptive_avg_pool(features, bin, bin)?;
            let p = conv.apply(tape, store, p, None)?;
            let p = tape.relu(p);
            parts.push(tape.upsample_bilinear(p, fs, fs)?);
        }
        let cat = tape.concat(&parts, 1)?;
        let ctx = self.ppm_fuse.apply(tape, store, cat, None)?;
        let ctx = tape.relu(ctx);
        let r_s = self.proj_s.forward(tape, store, ctx)?;

        let (fused, frequency_weights) = match &self.freq {
            None => (r_s, None),
            Some(f) => {
                let v = multispectral_extract_var(tape, features, &f.assignment, &f.basis)?;
                let (v_prime, w) = match (&f.lfe, self.cfg.variant.frequency_mode()) {
                    (Some(lfe), _) => {
                        let (vp, w) = lfe_forward(tape, store, v, lfe)?;
                        (vp, Some(w))
                    }
                    (None, Some(mode)) => {
                        (apply_frequency_mode(tape, store, v, self.cfg.components(), mode, None)?, None)
                    }
                    (None, None) => unreachable!("frequency branch without a mode"),
                };
                (sff_fuse(tape, store, r_s, v_prime, &f.sff)?, w)
            }
        };

        let logits = self.head.apply(tape, store, fused, None)?;
        let logits = tape.upsample_bilinear(logits, fs * OUTPUT_STRIDE, fs * OUTPUT_STRIDE)?;
        Ok(ForwardVars { logits, spatial: r_s, frequency_weights })
    }

    pub fn forward_var(&self, tape: &mut Tape, images: Var) -> Result<ForwardVars> {
        self.forward_with(tape, &self.store, images)
    }

    /// Logits `[K, H, W]` for a single `[3, H, W]` image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.forward_with_weights(image)?;
        Ok(logits)
    }

    /// Logits plus the frequency-component weights (learnable variant only).
    pub fn forward_with_weights(&self, image: &Tensor) -> Result<(Tensor, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.constant(as_batch(image)?);
        let out = self.forward_var(&mut tape, x)?;
        let k = self.cfg.classes;
        let s = self.cfg.input_size;
        let logits = tape.value(out.logits).clone().reshape(&[k, s, s])?;
        let w = out.frequency_weights.map(|w| tape.value(w).data().to_vec());
        Ok((logits, w))
    }
}

pub(crate) fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [c, h, w] => image.clone().reshape(&[1, *c, *h, *w]),
        s => Err(Error::Config(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(variant: Variant) -> ToyNetConfig {
        ToyNetConfig {
            input_size: 16,
            widths: [4, 4, 8],
            ppm_channels: 2,
            context_channels: 8,
            fusion_channels: 8,
            dct_block: 2,
            classes: 3,
            variant,
            ..ToyNetConfig::default()
        }
    }

    fn image(seed: u64, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, s, s], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shape_and_finite() {
        for v in [Variant::Baseline, Variant::Fdl, Variant::TopK(2), Variant::StaticAll] {
            let net = ToyNet::new(small(v), 1).unwrap();
            let y = net.forward(&image(2, 16)).unwrap();
            assert_eq!(y.shape(), &[3, 16, 16]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn shared_parameters_identical_across_variants() {
        let base = ToyNet::new(small(Variant::Baseline), 9).unwrap();
        let fdl = ToyNet::new(small(Variant::Fdl), 9).unwrap();
        for (_, name, p) in base.store.iter() {
            let id = fdl.store.find(name).unwrap();
            assert_eq!(fdl.store.value(id), &p.value, "{name}");
        }
        assert!(fdl.store.len() > base.store.len());
    }

    #[test]
    fn alpha_zero_matches_baseline_bitwise() {
        let base = ToyNet::new(small(Variant::Baseline), 3).unwrap();
        for v in [Variant::Fdl, Variant::StaticAll, Variant::TopK(1)] {
            let mut other = ToyNet::new(small(v), 77).unwrap();
            let copied = other.copy_shared_from(&base);
            assert_eq!(copied, base.store.len());
            let img = image(4, 16);
            assert_eq!(base.forward(&img).unwrap(), other.forward(&img).unwrap());
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut net = ToyNet::new(small(Variant::Fdl), 5).unwrap();
        let id = net.head_weight();
        net.store.get_mut(id).value.data_mut().fill(0.0);
        let y = net.forward(&image(6, 16)).unwrap();
        assert!(y.data().iter().all(|&v| v == y.data()[0]));
    }

    #[test]
    fn wrong_input_size_is_config_error() {
        let net = ToyNet::new(small(Variant::Fdl), 5).unwrap();
        assert!(matches!(net.forward(&image(6, 24)), Err(Error::Config(_))));
    }

    #[test]
    fn learnable_variant_reports_weights() {
        let net = ToyNet::new(small(Variant::Fdl), 5).unwrap();
        let (_, w) = net.forward_with_weights(&image(6, 16)).unwrap();
        let w = w.unwrap();
        assert_eq!(w.len(), 4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
