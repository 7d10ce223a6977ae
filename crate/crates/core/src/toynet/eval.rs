use crate::error::{Error, Result};
use crate::nn::LabelMap;
use crate::tensor::Tensor;

use super::net::ToyNet;
use super::synth::SynthScene;

/// Per-pixel argmax over `[K, H, W]` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let [k, h, w] = logits.shape() else {
        return Err(Error::dim("argmax", logits.shape(), &[0, 0, 0]));
    };
    let p = h * w;
    let d = logits.data();
    let data = (0..p)
        .map(|px| {
            let mut best = 0;
            for c in 1..*k {
                if d[c * p + px] > d[best * p + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(*h, *w, data)
}

pub fn predict(net: &ToyNet, image: &Tensor) -> Result<LabelMap> {
    argmax_labels(&net.forward(image)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both predictions and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU per class from the pooled confusion counts of all image pairs.
pub fn evaluate_miou(preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::dim("evaluate_miou", &[preds.len()], &[gts.len()]));
    }
    if preds.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fneg = vec![0u64; classes];
    for (p, g) in preds.iter().zip(gts) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::dim("evaluate_miou", &[p.height, p.width], &[g.height, g.width]));
        }
        for (&a, &b) in p.data.iter().zip(&g.data) {
            let (a, b) = (a as usize, b as usize);
            if a >= classes || b >= classes {
                return Err(Error::InvalidInput(format!(
                    "label {} outside 0..{classes}",
                    a.max(b)
                )));
            }
            if a == b {
                tp[a] += 1;
            } else {
                fp[a] += 1;
                fneg[b] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let union = tp[c] + fp[c] + fneg[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

pub fn evaluate_net(net: &ToyNet, scenes: &[SynthScene]) -> Result<MiouReport> {
    let preds = scenes
        .iter()
        .map(|s| predict(net, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<LabelMap> = scenes.iter().map(|s| s.labels.clone()).collect();
    evaluate_miou(&preds, &gts, net.cfg.classes)
}
