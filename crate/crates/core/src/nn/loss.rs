//! Segmentation cross-entropy, semantic-edge cross-entropy and OHEM pixel selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidSize(format!(
                "label map {height}x{width} with {} entries",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, data: vec![class; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub edge_radius: usize,
    pub ignore_index: u8,
    pub ohem_enabled: bool,
    pub ohem_keep_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.01,
            edge_radius: 1,
            ignore_index: 255,
            ohem_enabled: true,
            ohem_keep_fraction: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.ohem_keep_fraction > 0.0 && self.ohem_keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "ohem keep fraction must lie in (0, 1], got {}",
                self.ohem_keep_fraction
            )));
        }
        if self.edge_radius == 0 {
            return Err(Error::Config("edge radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// 1 where a valid pixel has a differently-labelled valid pixel within Chebyshev
/// distance `radius`.
pub fn edge_mask(labels: &LabelMap, radius: usize, ignore_index: u8) -> Vec<bool> {
    let (h, w) = (labels.height, labels.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = labels.at(y, x);
            if c == ignore_index {
                continue;
            }
            'search: for ny in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for nx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    let o = labels.at(ny, nx);
                    if o != ignore_index && o != c {
                        out[y * w + x] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel cross-entropy for `logits` `[K, H, W]`; `None` on ignored pixels.
pub fn pixel_losses(logits: &Tensor, labels: &LabelMap, ignore_index: u8) -> Result<Vec<Option<f64>>> {
    let (k, p) = check_shapes(logits, labels)?;
    let x = logits.data();
    labels
        .data
        .iter()
        .enumerate()
        .map(|(px, &l)| {
            if l == ignore_index {
                return Ok(None);
            }
            let l = l as usize;
            if l >= k {
                return Err(Error::InvalidInput(format!("label {l} out of range for {k} classes")));
            }
            let max = (0..k).map(|c| x[c * p + px]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[c * p + px] - max).exp()).sum();
            Ok(Some(z.ln() + max - x[l * p + px]))
        })
        .collect()
}

fn check_shapes(logits: &Tensor, labels: &LabelMap) -> Result<(usize, usize)> {
    match logits.shape() {
        [k, h, w] if *h == labels.height && *w == labels.width => {
            if *k < 2 {
                return Err(Error::Config(format!("need at least 2 classes, got {k}")));
            }
            Ok((*k, h * w))
        }
        s => Err(Error::dim("seg_losses", s, &[0, labels.height, labels.width])),
    }
}

/// Indices of the hardest `ceil(fraction · |valid|)` pixels, ties broken by index.
pub fn ohem_select(losses: &[Option<f64>], fraction: f64) -> Vec<usize> {
    let mut valid: Vec<(usize, f64)> = losses
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    let keep = ((fraction * valid.len() as f64).ceil() as usize).clamp(1, valid.len().max(1));
    valid.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    valid.truncate(keep);
    let mut idx: Vec<usize> = valid.into_iter().map(|(i, _)| i).collect();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub seg: Var,
    pub edge: Var,
}

/// Per-pixel weights of both loss terms for one label map.
struct PixelWeights {
    /// Labels with ignored pixels mapped to 0 (their weights are 0).
    labels: Vec<usize>,
    seg: Vec<f64>,
    edge: Vec<f64>,
}

impl PixelWeights {
    fn new(logits: &Tensor, labels: &LabelMap, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, p) = check_shapes(logits, labels)?;
        let per_pixel = pixel_losses(logits, labels, cfg.ignore_index)?;
        if per_pixel.iter().all(Option::is_none) {
            return Err(Error::Degenerate("no valid pixels in label map".into()));
        }

        let selected: Vec<usize> = if cfg.ohem_enabled {
            ohem_select(&per_pixel, cfg.ohem_keep_fraction)
        } else {
            (0..p).filter(|&i| per_pixel[i].is_some()).collect()
        };
        let mut seg = vec![0.0; p];
        let share = 1.0 / selected.len() as f64;
        for i in selected {
            seg[i] = share;
        }

        let edges = edge_mask(labels, cfg.edge_radius, cfg.ignore_index);
        let n_edge = edges.iter().filter(|&&e| e).count();
        let edge: Vec<f64> = if n_edge == 0 {
            vec![0.0; p]
        } else {
            edges.iter().map(|&e| if e { 1.0 / n_edge as f64 } else { 0.0 }).collect()
        };

        let labels = labels
            .data
            .iter()
            .map(|&l| if l == cfg.ignore_index { 0 } else { l as usize })
            .collect();
        Ok(Self { labels, seg, edge })
    }

    /// Weights of `scale·(λ₁·L_seg + λ₂·L_edge)`.
    fn total(&self, cfg: &LossConfig, scale: f64) -> Vec<f64> {
        self.seg
            .iter()
            .zip(&self.edge)
            .map(|(s, e)| scale * (cfg.lambda1 * s + cfg.lambda2 * e))
            .collect()
    }
}

/// Builds `λ₁·L_seg + λ₂·L_edge` on the tape for one `[K, H, W]` logit map.
///
/// The total is one compensated weighted sum rather than `λ₁·seg + λ₂·edge`.
pub fn seg_losses_var(tape: &mut Tape, logits: Var, labels: &LabelMap, cfg: &LossConfig) -> Result<LossVars> {
    let w = PixelWeights::new(tape.value(logits), labels, cfg)?;
    let total_w = w.total(cfg, 1.0);
    let seg = tape.weighted_nll(logits, w.labels.clone(), w.seg)?;
    let edge = tape.weighted_nll(logits, w.labels.clone(), w.edge)?;
    let total = tape.weighted_nll(logits, w.labels, total_w)?;
    Ok(LossVars { total, seg, edge })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLosses {
    pub total: f64,
    pub seg: f64,
    pub edge: f64,
}

pub fn seg_losses(logits: &Tensor, labels: &LabelMap, cfg: &LossConfig) -> Result<SegLosses> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let v = seg_losses_var(&mut tape, x, labels, cfg)?;
    Ok(SegLosses {
        total: tape.scalar(v.total),
        seg: tape.scalar(v.seg),
        edge: tape.scalar(v.edge),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()
    }

    fn no_ohem() -> LossConfig {
        LossConfig { ohem_enabled: false, ..LossConfig::default() }
    }

    #[test]
    fn uniform_labels_have_no_edges() {
        assert!(edge_mask(&LabelMap::filled(5, 7, 3), 1, 255).iter().all(|&e| !e));
    }

    #[test]
    fn split_map_marks_middle_columns() {
        let data = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect();
        let m = edge_mask(&LabelMap::new(4, 4, data).unwrap(), 1, 255);
        for y in 0..4 {
            let row: Vec<bool> = (0..4).map(|x| m[y * 4 + x]).collect();
            assert_eq!(row, vec![false, true, true, false]);
        }
    }

    #[test]
    fn ignored_pixels_neither_edges_nor_triggers() {
        let data = vec![0, 255, 0, 0, 0, 0, 0, 0, 0];
        let m = edge_mask(&LabelMap::new(3, 3, data).unwrap(), 1, 255);
        assert!(m.iter().all(|&e| !e));
    }

    #[test]
    fn edge_mask_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for radius in 1..=2 {
            let mut labels = random_labels(&mut rng, 16, 16, 3);
            labels.data[5] = 255;
            labels.data[100] = 255;
            let m = edge_mask(&labels, radius, 255);
            let r = radius as i64;
            for p in 0..256 {
                let (y, x) = ((p / 16) as i64, (p % 16) as i64);
                let c = labels.data[p];
                let expect = c != 255
                    && (0..256).any(|q| {
                        let (qy, qx) = ((q / 16) as i64, (q % 16) as i64);
                        let o = labels.data[q];
                        (qy - y).abs().max((qx - x).abs()) <= r && o != 255 && o != c
                    });
                assert_eq!(m[p], expect, "pixel {p} radius {radius}");
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = random_labels(&mut rng, 6, 6, 19);
        let l = seg_losses(&Tensor::zeros(&[19, 6, 6]), &labels, &no_ohem()).unwrap();
        assert!((l.seg - 19f64.ln()).abs() < 1e-12);
        assert!((l.edge - 19f64.ln()).abs() < 1e-12);
        let with_ohem = seg_losses(&Tensor::zeros(&[19, 6, 6]), &labels, &LossConfig::default()).unwrap();
        assert!((with_ohem.seg - 19f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = random_labels(&mut rng, 8, 8, 3);
        let logits = Tensor::from_fn(&[3, 8, 8], |i| {
            if labels.data[i % 64] as usize == i / 64 { 1e3 } else { -1e3 }
        });
        let l = seg_losses(&logits, &labels, &LossConfig::default()).unwrap();
        assert!(l.total < 1e-300 && l.seg < 1e-300 && l.edge < 1e-300);
        assert!(l.total >= 0.0);
    }

    #[test]
    fn matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut labels = random_labels(&mut rng, 8, 8, 3);
        labels.data[9] = 255;
        let logits = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(-2.0..2.0));
        let cfg = no_ohem();
        let l = seg_losses(&logits, &labels, &cfg).unwrap();

        let edges = edge_mask(&labels, 1, 255);
        let (mut seg, mut ns, mut edge, mut ne) = (0.0, 0, 0.0, 0);
        for p in 0..64 {
            let c = labels.data[p];
            if c == 255 {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|k| logits.data()[k * 64 + p]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            let ce = lse - z[c as usize];
            seg += ce;
            ns += 1;
            if edges[p] {
                edge += ce;
                ne += 1;
            }
        }
        let (seg, edge) = (seg / ns as f64, edge / ne as f64);
        assert!((l.seg - seg).abs() < 1e-12);
        assert!((l.edge - edge).abs() < 1e-12);
        assert!((l.total - (seg + 0.01 * edge)).abs() < 1e-12);
    }

    #[test]
    fn ohem_keeps_hardest_quarter() {
        let losses = vec![Some(0.1), None, Some(0.9), Some(0.5), Some(0.9), Some(0.2), Some(0.3), Some(0.0), Some(0.4)];
        // 8 valid, keep 2: both 0.9 entries.
        assert_eq!(ohem_select(&losses, 0.25), vec![2, 4]);
        // 8 valid, keep ceil(2.4) = 3.
        assert_eq!(ohem_select(&losses, 0.3), vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = random_labels(&mut rng, 8, 8, 3);
        let logits = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(-2.0..2.0));
        let per = pixel_losses(&logits, &labels, 255).unwrap();
        let mut sorted: Vec<f64> = per.iter().map(|l| l.unwrap()).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let expect = sorted[..16].iter().sum::<f64>() / 16.0;
        let l = seg_losses(&logits, &labels, &LossConfig::default()).unwrap();
        assert!((l.seg - expect).abs() < 1e-12);
    }

    #[test]
    fn total_nondecreasing_in_lambda2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = random_labels(&mut rng, 8, 8, 4);
        let logits = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-2.0..2.0));
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10 {
            let cfg = LossConfig { lambda2: i as f64 * 0.05, ..LossConfig::default() };
            let l = seg_losses(&logits, &labels, &cfg).unwrap();
            assert!(l.edge > 0.0);
            assert!(l.total >= prev);
            prev = l.total;
        }
    }

    #[test]
    fn all_ignored_is_degenerate() {
        let labels = LabelMap::filled(4, 4, 255);
        let r = seg_losses(&Tensor::zeros(&[3, 4, 4]), &labels, &LossConfig::default());
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn no_edges_gives_zero_edge_loss() {
        let labels = LabelMap::filled(4, 4, 1);
        let l = seg_losses(&Tensor::zeros(&[3, 4, 4]), &labels, &LossConfig::default()).unwrap();
        assert_eq!(l.edge, 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let labels = LabelMap::filled(4, 4, 1);
        for cfg in [
            LossConfig { lambda2: -1.0, ..LossConfig::default() },
            LossConfig { ohem_keep_fraction: 0.0, ..LossConfig::default() },
            LossConfig { ohem_keep_fraction: 1.5, ..LossConfig::default() },
        ] {
            assert!(matches!(seg_losses(&Tensor::zeros(&[3, 4, 4]), &labels, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn grad_check_logits() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let labels = random_labels(&mut rng, 6, 6, 3);
            let mut store = ParamStore::new();
            let id = store.add("logits", Tensor::from_fn(&[3, 6, 6], |_| rng.gen_range(-2.0..2.0)));
            let cfg = LossConfig { lambda2: 0.3, ..no_ohem() };
            let r = grad_check(&mut store, &[id], DEFAULT_EPS, |s, t| {
                let x = t.param(s, id);
                Ok(seg_losses_var(t, x, &labels, &cfg)?.total)
            })
            .unwrap();
            assert!(r.max_relative_error < 1e-5, "{r:?}");
        }
    }
}
