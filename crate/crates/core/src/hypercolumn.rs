//! Per-pixel hypercolumns: every feature block resampled to the target
//! resolution and concatenated channel-wise.
//!
//! Lower-resolution blocks are upsampled bilinearly on a corner-aligned grid,
//! so block samples land exactly on target pixels `j·(T−1)/(res−1)`. Blocks
//! above the target resolution are average-pooled. Channel order is block
//! order, then channel order within a block.

use rayon::prelude::*;

use crate::hoff::Tensor;
use crate::scene::{FeatureBlock, FeatureStack};
use crate::{Error, Result};

/// Dense `R × R × C` hypercolumn field.
#[derive(Debug, Clone, PartialEq)]
pub struct HypercolumnField {
    res: usize,
    channels: usize,
    offsets: Vec<usize>,
    data: Vec<f32>,
}

/// Hypercolumn dimension for the given per-block channel counts and optional caps.
pub fn hypercolumn_dim(block_channels: &[usize], caps: Option<&[usize]>) -> Result<usize> {
    Ok(kept_channels(block_channels, caps)?.iter().sum())
}

fn kept_channels(block_channels: &[usize], caps: Option<&[usize]>) -> Result<Vec<usize>> {
    match caps {
        None => Ok(block_channels.to_vec()),
        Some(caps) if caps.len() != block_channels.len() => Err(Error::shape(
            "channel caps",
            block_channels.len(),
            caps.len(),
        )),
        Some(caps) => Ok(block_channels
            .iter()
            .zip(caps)
            .map(|(&c, &cap)| c.min(cap))
            .collect()),
    }
}

/// Source index pair and interpolation weight for each target coordinate.
fn bilinear_taps(src: usize, target: usize) -> Vec<(usize, usize, f32)> {
    if src == 1 || target == 1 {
        return vec![(0, 0, 0.0); target];
    }
    let den = target - 1;
    (0..target)
        .map(|x| {
            let num = x * (src - 1);
            let i0 = num / den;
            let rem = num % den;
            if rem == 0 {
                (i0, i0, 0.0)
            } else {
                (i0, (i0 + 1).min(src - 1), (rem as f64 / den as f64) as f32)
            }
        })
        .collect()
}

enum Resample {
    Bilinear(Vec<(usize, usize, f32)>),
    Pool(usize),
}

struct Plan<'a> {
    block: &'a FeatureBlock,
    keep: usize,
    offset: usize,
    resample: Resample,
}

fn plan<'a>(
    features: &'a FeatureStack,
    target_res: usize,
    caps: Option<&[usize]>,
) -> Result<(Vec<Plan<'a>>, usize)> {
    if target_res == 0 {
        return Err(Error::Input("target resolution must be positive".into()));
    }
    let chans: Vec<usize> = features.blocks.iter().map(|b| b.channels).collect();
    let kept = kept_channels(&chans, caps)?;
    let mut plans = Vec::with_capacity(kept.len());
    let mut offset = 0;
    for (block, keep) in features.blocks.iter().zip(kept) {
        if block.data.len() != block.res * block.res * block.channels {
            return Err(Error::shape(
                "feature block",
                block.res * block.res * block.channels,
                block.data.len(),
            ));
        }
        let resample = if block.res <= target_res {
            Resample::Bilinear(bilinear_taps(block.res, target_res))
        } else if block.res % target_res == 0 {
            Resample::Pool(block.res / target_res)
        } else {
            return Err(Error::Input(format!(
                "block resolution {} is not a multiple of target resolution {target_res}",
                block.res
            )));
        };
        plans.push(Plan {
            block,
            keep,
            offset,
            resample,
        });
        offset += keep;
    }
    Ok((plans, offset))
}

fn fill_pixel(plans: &[Plan<'_>], x: usize, y: usize, out: &mut [f32]) {
    for p in plans {
        if p.keep == 0 {
            continue;
        }
        let b = p.block;
        let dst = &mut out[p.offset..p.offset + p.keep];
        match &p.resample {
            Resample::Bilinear(taps) => {
                let (x0, x1, tx) = taps[x];
                let (y0, y1, ty) = taps[y];
                let at = |xx: usize, yy: usize| (yy * b.res + xx) * b.channels;
                let (a, bb, c, d) = (at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1));
                for (k, v) in dst.iter_mut().enumerate() {
                    let top = if tx == 0.0 {
                        b.data[a + k]
                    } else {
                        (1.0 - tx) * b.data[a + k] + tx * b.data[bb + k]
                    };
                    *v = if ty == 0.0 {
                        top
                    } else {
                        let bottom = if tx == 0.0 {
                            b.data[c + k]
                        } else {
                            (1.0 - tx) * b.data[c + k] + tx * b.data[d + k]
                        };
                        (1.0 - ty) * top + ty * bottom
                    };
                }
            }
            Resample::Pool(f) => {
                let inv = 1.0 / (f * f) as f64;
                for (k, v) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            acc += b.data[(yy * b.res + xx) * b.channels + k] as f64;
                        }
                    }
                    *v = (acc * inv) as f32;
                }
            }
        }
    }
}

/// Build the dense field. `caps`, when given, keeps only the first `caps[l]`
/// channels of block `l`.
pub fn build(
    features: &FeatureStack,
    target_res: usize,
    caps: Option<&[usize]>,
) -> Result<HypercolumnField> {
    let (plans, channels) = plan(features, target_res, caps)?;
    let mut data = vec![0.0f32; target_res * target_res * channels];
    if channels > 0 {
        data.par_chunks_mut(target_res * channels)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, px) in row.chunks_mut(channels).enumerate() {
                    fill_pixel(&plans, x, y, px);
                }
            });
    }
    Ok(HypercolumnField {
        res: target_res,
        channels,
        offsets: plans.iter().map(|p| p.offset).collect(),
        data,
    })
}

/// On-demand hypercolumns that never materialize the full field.
pub struct LazyField<'a> {
    plans: Vec<Plan<'a>>,
    res: usize,
    channels: usize,
}

impl<'a> LazyField<'a> {
    pub fn new(
        features: &'a FeatureStack,
        target_res: usize,
        caps: Option<&[usize]>,
    ) -> Result<Self> {
        let (plans, channels) = plan(features, target_res, caps)?;
        Ok(LazyField {
            plans,
            res: target_res,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_into(&self, x: usize, y: usize, out: &mut [f32]) -> Result<()> {
        if x >= self.res || y >= self.res {
            return Err(Error::Input(format!(
                "pixel ({x}, {y}) outside {}×{}",
                self.res, self.res
            )));
        }
        if out.len() != self.channels {
            return Err(Error::shape("hypercolumn buffer", self.channels, out.len()));
        }
        fill_pixel(&self.plans, x, y, out);
        Ok(())
    }
}

impl HypercolumnField {
    pub fn from_vec(
        res: usize,
        channels: usize,
        offsets: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != res * res * channels {
            return Err(Error::shape(
                "hypercolumn field",
                res * res * channels,
                data.len(),
            ));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) || offsets.last().is_some_and(|&o| o > channels)
        {
            return Err(Error::Input(format!(
                "inconsistent block offsets {offsets:?}"
            )));
        }
        Ok(HypercolumnField {
            res,
            channels,
            offsets,
            data,
        })
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Start index of each block's channels.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// All pixels, row-major, `channels` values each.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> Result<&[f32]> {
        if x >= self.res || y >= self.res {
            return Err(Error::Input(format!(
                "pixel ({x}, {y}) outside {}×{}",
                self.res, self.res
            )));
        }
        let i = (y * self.res + x) * self.channels;
        Ok(&self.data[i..i + self.channels])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(vec![self.res, self.res, self.channels], self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(blocks: Vec<(usize, usize, Vec<f32>)>) -> FeatureStack {
        FeatureStack {
            blocks: blocks
                .into_iter()
                .map(|(res, channels, data)| FeatureBlock {
                    res,
                    channels,
                    data,
                })
                .collect(),
        }
    }

    #[test]
    fn identity_at_native_resolution() {
        let data: Vec<f32> = (0..4 * 4 * 2).map(|i| i as f32).collect();
        let f = build(&stack(vec![(4, 2, data.clone())]), 4, None).unwrap();
        assert_eq!(f.data(), &data[..]);
    }

    #[test]
    fn full_scale_dimensions() {
        let mut chans = vec![512; 10];
        chans.extend([256, 256, 128, 128, 64, 64, 32, 32]);
        assert_eq!(hypercolumn_dim(&chans, None).unwrap(), 6080);
        let mut caps = vec![256; 10];
        caps.extend(vec![usize::MAX; 8]);
        assert_eq!(hypercolumn_dim(&chans, Some(&caps)).unwrap(), 3520);
        assert!(hypercolumn_dim(&chans, Some(&caps[..3])).is_err());
    }

    #[test]
    fn two_by_two_bilinear() {
        let f = build(&stack(vec![(2, 1, vec![1.0, 2.0, 3.0, 4.0])]), 4, None).unwrap();
        let v = |x, y| f.pixel(x, y).unwrap()[0];
        assert_eq!((v(0, 0), v(3, 0), v(0, 3), v(3, 3)), (1.0, 2.0, 3.0, 4.0));
        // x = 1 maps to source 1/3.
        let want = 1.0 + (2.0 - 1.0) / 3.0;
        assert!((v(1, 0) - want).abs() < 1e-6);
        let want = 1.0 + 1.0 / 3.0 + 2.0 / 3.0;
        assert!((v(1, 1) - want).abs() < 1e-6);
    }

    #[test]
    fn pooling_for_oversized_blocks() {
        let f = build(
            &stack(vec![(4, 1, (0..16).map(|i| i as f32).collect())]),
            2,
            None,
        )
        .unwrap();
        assert_eq!(f.pixel(0, 0).unwrap(), &[2.5]);
        assert!(build(&stack(vec![(4, 1, vec![0.0; 16])]), 3, None).is_err());
    }

    #[test]
    fn lazy_matches_dense() {
        let s = stack(vec![
            (2, 2, (0..8).map(|i| i as f32 * 0.3).collect()),
            (4, 3, (0..48).map(|i| (i as f32).sin()).collect()),
        ]);
        let dense = build(&s, 8, Some(&[1, 3])).unwrap();
        let lazy = LazyField::new(&s, 8, Some(&[1, 3])).unwrap();
        let mut buf = vec![0.0; lazy.channels()];
        for y in 0..8 {
            for x in 0..8 {
                lazy.pixel_into(x, y, &mut buf).unwrap();
                assert_eq!(dense.pixel(x, y).unwrap(), &buf[..]);
            }
        }
        assert_eq!(dense.offsets(), &[0, 1]);
    }
}
