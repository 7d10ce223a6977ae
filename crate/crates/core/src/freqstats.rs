//! Block-DCT spectrogram statistics for day/night comparison.
//!
//! An image is cut into non-overlapping `N×N` blocks (partial edge blocks are
//! dropped), each block's absolute DCT spectrum is averaged over all blocks, and the
//! mean spectrum is summarised per frequency region. Across a dataset the per-image
//! region means are reduced to a mean and a population variance.

use std::fmt::Write as _;

use crate::dct::{self, DctBasis};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    L,
    M1,
    M2,
    H,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::L, Region::M1, Region::M2, Region::H];

    pub fn name(self) -> &'static str {
        match self {
            Region::L => "L",
            Region::M1 => "M1",
            Region::M2 => "M2",
            Region::H => "H",
        }
    }
}

/// Four disjoint cells sets covering the `N×N` spectrum: `L` is the top-left
/// `N/4 × N/4` corner, `M1` the rest of those rows, `M2` the rest of those columns,
/// `H` everything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub n: usize,
    pub regions: [Vec<(usize, usize)>; 4],
}

impl RegionPartition {
    pub fn region(&self, r: Region) -> &[(usize, usize)] {
        &self.regions[r as usize]
    }

    pub fn region_of(&self, u: usize, v: usize) -> Region {
        let q = self.n / 4;
        match (u < q, v < q) {
            (true, true) => Region::L,
            (true, false) => Region::M1,
            (false, true) => Region::M2,
            (false, false) => Region::H,
        }
    }
}

pub fn partition_spectrum(n: usize) -> Result<RegionPartition> {
    if n == 0 || !n.is_multiple_of(4) {
        return Err(Error::InvalidSize(format!(
            "spectrum size {n} must be a positive multiple of 4"
        )));
    }
    let mut p = RegionPartition {
        n,
        regions: Default::default(),
    };
    for u in 0..n {
        for v in 0..n {
            let r = p.region_of(u, v);
            p.regions[r as usize].push((u, v));
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageFreqSummary {
    pub region_means: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetFreqSummary {
    pub mean_of_means: [f64; 4],
    pub variance: [f64; 4],
    pub count: usize,
}

/// Mean absolute DCT spectrum over all complete blocks of a greyscale image.
pub fn mean_abs_spectrum(image: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    let n = basis.size();
    let [h, w] = image.shape() else {
        return Err(Error::InvalidInput(format!(
            "expected a greyscale H×W image, got shape {:?}",
            image.shape()
        )));
    };
    let (bh, bw) = (h / n, w / n);
    if bh == 0 || bw == 0 {
        return Err(Error::InvalidInput(format!(
            "image {h}×{w} is smaller than one {n}×{n} block"
        )));
    }
    let mut acc = Tensor::zeros(&[n, n]);
    let mut block = Tensor::zeros(&[n, n]);
    for by in 0..bh {
        for bx in 0..bw {
            for x in 0..n {
                let row = (by * n + x) * w + bx * n;
                block.data_mut()[x * n..(x + 1) * n].copy_from_slice(&image.data()[row..row + n]);
            }
            let spec = dct::dct2(&block, basis)?;
            for (a, s) in acc.data_mut().iter_mut().zip(spec.data()) {
                *a += s.abs();
            }
        }
    }
    let count = (bh * bw) as f64;
    Ok(acc.map(|v| v / count))
}

/// Region means of the mean absolute spectrum; the block size is the partition's `N`.
pub fn image_freq_summary(image: &Tensor, partition: &RegionPartition) -> Result<ImageFreqSummary> {
    let basis = dct::make_basis(partition.n)?;
    let spec = mean_abs_spectrum(image, &basis)?;
    let mut region_means = [0.0; 4];
    for r in Region::ALL {
        let cells = partition.region(r);
        let s: f64 = cells.iter().map(|&(u, v)| spec.at(&[u, v])).sum();
        region_means[r as usize] = s / cells.len() as f64;
    }
    Ok(ImageFreqSummary { region_means })
}

pub fn dataset_summary(summaries: &[ImageFreqSummary]) -> Result<DatasetFreqSummary> {
    if summaries.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: summaries.len(),
        });
    }
    let m = summaries.len() as f64;
    let mut mean = [0.0; 4];
    let mut variance = [0.0; 4];
    for r in 0..4 {
        mean[r] = summaries.iter().map(|s| s.region_means[r]).sum::<f64>() / m;
        variance[r] = summaries
            .iter()
            .map(|s| (s.region_means[r] - mean[r]).powi(2))
            .sum::<f64>()
            / m;
    }
    Ok(DatasetFreqSummary {
        mean_of_means: mean,
        variance,
        count: summaries.len(),
    })
}

pub const IMAGE_CSV_HEADER: &str = "image,L_mean,M1_mean,M2_mean,H_mean";
pub const DATASET_CSV_HEADER: &str = "region,mean_of_means,variance";

pub fn image_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a ImageFreqSummary)>) -> String {
    let mut out = format!("{IMAGE_CSV_HEADER}\n");
    for (name, s) in rows {
        let m = s.region_means;
        writeln!(out, "{name},{},{},{},{}", m[0], m[1], m[2], m[3]).unwrap();
    }
    out
}

pub fn dataset_csv(d: &DatasetFreqSummary) -> String {
    let mut out = format!("{DATASET_CSV_HEADER}\n");
    for r in Region::ALL {
        let i = r as usize;
        writeln!(out, "{},{},{}", r.name(), d.mean_of_means[i], d.variance[i]).unwrap();
    }
    out
}

/// Converts a `3×H×W` RGB tensor to BT.601 greyscale.
pub fn rgb_to_gray(rgb: &Tensor) -> Result<Tensor> {
    let [3, h, w] = rgb.shape() else {
        return Err(Error::dim("rgb_to_gray", rgb.shape(), &[3, 0, 0]));
    };
    let hw = h * w;
    let d = rgb.data();
    let data = (0..hw)
        .map(|p| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p])
        .collect();
    Tensor::new(&[*h, *w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn partition_sizes() {
        let p = partition_spectrum(8).unwrap();
        let sizes: Vec<usize> = Region::ALL.iter().map(|&r| p.region(r).len()).collect();
        assert_eq!(sizes, vec![4, 12, 12, 36]);
        let p4 = partition_spectrum(4).unwrap();
        let sizes: Vec<usize> = Region::ALL.iter().map(|&r| p4.region(r).len()).collect();
        assert_eq!(sizes, vec![1, 3, 3, 9]);
        assert!(partition_spectrum(6).is_err());
    }

    #[test]
    fn partition_disjoint_cover() {
        let p = partition_spectrum(8).unwrap();
        let mut seen = HashSet::new();
        for r in Region::ALL {
            for &c in p.region(r) {
                assert!(seen.insert(c), "{c:?} appears twice");
            }
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn constant_and_zero_images() {
        let p = partition_spectrum(8).unwrap();
        let s = image_freq_summary(&Tensor::full(&[16, 24], 0.5), &p).unwrap();
        assert!((s.region_means[0] - 1.0).abs() < 1e-12);
        for r in 1..4 {
            assert!(s.region_means[r].abs() < 1e-12);
        }
        let z = image_freq_summary(&Tensor::zeros(&[8, 8]), &p).unwrap();
        assert_eq!(z.region_means, [0.0; 4]);
        assert!(image_freq_summary(&Tensor::zeros(&[7, 30]), &p).is_err());
    }

    #[test]
    fn explicit_four_block_oracle() {
        let p = partition_spectrum(8).unwrap();
        let b = dct::make_basis(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // 19×17 so the trailing row/column strips are dropped
        let img = Tensor::from_fn(&[19, 17], |_| rng.gen_range(0.0..1.0));
        let got = image_freq_summary(&img, &p).unwrap();
        let mut mean = [[0.0; 8]; 8];
        for (oy, ox) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
            let block = Tensor::from_fn(&[8, 8], |i| img.at(&[oy + i / 8, ox + i % 8]));
            let spec = dct::dct2(&block, &b).unwrap();
            for u in 0..8 {
                for v in 0..8 {
                    mean[u][v] += spec.at(&[u, v]).abs() / 4.0;
                }
            }
        }
        for r in Region::ALL {
            let cells = p.region(r);
            let e: f64 = cells.iter().map(|&(u, v)| mean[u][v]).sum::<f64>() / cells.len() as f64;
            assert!((got.region_means[r as usize] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_cases() {
        let a = ImageFreqSummary { region_means: [1.0, 0.2, 0.3, 0.4] };
        let b = ImageFreqSummary { region_means: [3.0, 0.2, 0.3, 0.4] };
        let d = dataset_summary(&[a, b]).unwrap();
        assert_eq!(d.mean_of_means[0], 2.0);
        assert_eq!(d.variance[0], 1.0);
        assert_eq!(&d.variance[1..], &[0.0, 0.0, 0.0]);
        assert!(matches!(
            dataset_summary(&[a]),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));

        let same = dataset_summary(&[a; 5]).unwrap();
        assert_eq!(same.variance, [0.0; 4]);
    }

    #[test]
    fn dataset_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let sums: Vec<_> = (0..50)
            .map(|_| ImageFreqSummary {
                region_means: [0; 4].map(|_| rng.gen_range(0.0..5.0)),
            })
            .collect();
        let d = dataset_summary(&sums).unwrap();
        for r in 0..4 {
            let vals: Vec<f64> = sums.iter().map(|s| s.region_means[r]).collect();
            let mean = vals.iter().sum::<f64>() / 50.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((d.mean_of_means[r] - mean).abs() < 1e-12);
            assert!((d.variance[r] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_by_block_and_scaling() {
        let p = partition_spectrum(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = Tensor::from_fn(&[24, 24], |_| rng.gen_range(0.0..1.0));
        // cyclic shift by 8 rows keeps the same set of blocks
        let shifted = Tensor::from_fn(&[24, 24], |i| img.at(&[(i / 24 + 8) % 24, i % 24]));
        let a = image_freq_summary(&img, &p).unwrap();
        let b = image_freq_summary(&shifted, &p).unwrap();
        let c = image_freq_summary(&img.map(|v| 0.5 * v), &p).unwrap();
        for r in 0..4 {
            assert!((a.region_means[r] - b.region_means[r]).abs() < 1e-12);
            assert!((0.5 * a.region_means[r] - c.region_means[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let s = ImageFreqSummary { region_means: [1.0, 0.0, 0.0, 0.0] };
        assert_eq!(
            image_csv([("a.pgm", &s)]),
            "image,L_mean,M1_mean,M2_mean,H_mean\na.pgm,1,0,0,0\n"
        );
        let d = DatasetFreqSummary { mean_of_means: [2.0, 0.5, 0.5, 0.25], variance: [1.0, 0.0, 0.0, 0.0], count: 2 };
        assert_eq!(
            dataset_csv(&d),
            "region,mean_of_means,variance\nL,2,1\nM1,0.5,0\nM2,0.5,0\nH,0.25,0\n"
        );
    }
}
