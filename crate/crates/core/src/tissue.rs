//! Glass-vs-tissue segmentation on the lowest-resolution level.
//!
//! Pixels far enough (Euclidean RGB distance) from the reference colour are tissue; the binary
//! mask is then closed (dilation, then erosion) with a square structuring element. Otsu's
//! threshold over a gray histogram is available as an alternative thresholder.

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::pyramid::{ImagePyramid, PyramidError};
use crate::scalar::Scalar;

/// Distance from black to white, `sqrt(3 * 255^2)`.
pub const MAX_COLOR_DISTANCE: f64 = 441.672_955_930_063_7;
pub const DEFAULT_THRESHOLD: f64 = 30.0;
pub const DEFAULT_CLOSING_RADIUS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TissueError {
    #[error("tissue segmentation needs an RGB pyramid, got {0} channel(s)")]
    Channels(u8),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub threshold: f64,
    pub closing_radius: u32,
    pub reference_color: [u8; 3],
}

impl Default for TissueParams {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, closing_radius: DEFAULT_CLOSING_RADIUS, reference_color: [255; 3] }
    }
}

impl TissueParams {
    pub fn validate(&self) -> Result<(), TissueError> {
        if !(0.0..=441.68).contains(&self.threshold) {
            return Err(TissueError::Argument(format!(
                "threshold {} outside [0, 441.68]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Binary raster, 1 = tissue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl TissueMask {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn tissue_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

pub fn color_distance<S: Scalar>(pixel: [u8; 3], reference: [u8; 3]) -> S {
    let sq: S = pixel
        .iter()
        .zip(reference)
        .map(|(&p, r)| {
            let d = S::from_byte(r) - S::from_byte(p);
            d * d
        })
        .fold(S::zero(), |a, b| a + b);
    sq.sqrt()
}

/// Marks pixels whose distance from `reference` reaches `threshold`.
pub fn threshold_distance(rgb: &[u8], width: u32, height: u32, threshold: f64, reference: [u8; 3]) -> TissueMask {
    let data = rgb
        .chunks_exact(3)
        .map(|p| u8::from(color_distance::<f64>([p[0], p[1], p[2]], reference) >= threshold))
        .collect();
    TissueMask { width, height, data }
}

// Sliding window over one line. `keep` decides the output from (ones in window, window length);
// windows are clipped at the border.
fn line_filter(src: &[u8], dst: &mut [u8], radius: usize, keep: impl Fn(usize, usize) -> bool) {
    let n = src.len();
    let mut prefix = vec![0usize; n + 1];
    for (i, &v) in src.iter().enumerate() {
        prefix[i + 1] = prefix[i] + usize::from(v != 0);
    }
    for i in 0..n {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(n);
        dst[i] = u8::from(keep(prefix[hi] - prefix[lo], hi - lo));
    }
}

fn separable(mask: &TissueMask, radius: u32, keep: impl Fn(usize, usize) -> bool + Copy) -> TissueMask {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let r = radius as usize;
    let mut rows = vec![0u8; w * h];
    for y in 0..h {
        line_filter(&mask.data[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], r, keep);
    }
    let mut out = vec![0u8; w * h];
    let mut col = vec![0u8; h];
    let mut col_out = vec![0u8; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        line_filter(&col, &mut col_out, r, keep);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    TissueMask { width: mask.width, height: mask.height, data: out }
}

/// Binary dilation with a `(2r+1)`-square element; outside pixels are ignored.
pub fn dilate(mask: &TissueMask, radius: u32) -> TissueMask {
    separable(mask, radius, |ones, _| ones > 0)
}

/// Binary erosion with a `(2r+1)`-square element; outside pixels are ignored.
pub fn erode(mask: &TissueMask, radius: u32) -> TissueMask {
    separable(mask, radius, |ones, len| ones == len)
}

pub fn close(mask: &TissueMask, radius: u32) -> TissueMask {
    if radius == 0 {
        return mask.clone();
    }
    erode(&dilate(mask, radius), radius)
}

fn lowest_rgb(p: &ImagePyramid) -> Result<(Vec<u8>, u32, u32), TissueError> {
    if p.channels() != 3 {
        return Err(TissueError::Channels(p.channels()));
    }
    let level = p.lowest_level();
    let (w, h) = p.level_dims(level).expect("lowest level");
    Ok((p.read_level(level)?, w, h))
}

pub fn segment_rgb(rgb: &[u8], width: u32, height: u32, params: &TissueParams) -> Result<TissueMask, TissueError> {
    params.validate()?;
    let raw = threshold_distance(rgb, width, height, params.threshold, params.reference_color);
    Ok(close(&raw, params.closing_radius))
}

/// Segments the pyramid's lowest-resolution level.
pub fn segment_tissue(p: &ImagePyramid, params: &TissueParams) -> Result<TissueMask, TissueError> {
    let (rgb, w, h) = lowest_rgb(p)?;
    segment_rgb(&rgb, w, h, params)
}

/// Box-averages an RGB raster by an integer factor, rounding half up. Border blocks average the
/// pixels they contain.
pub fn downsample_rgb(rgb: &[u8], width: u32, height: u32, factor: u32) -> (Vec<u8>, u32, u32) {
    let f = factor.max(1) as usize;
    let (w, h) = (width as usize, height as usize);
    let (ow, oh) = (w.div_ceil(f), h.div_ceil(f));
    let mut out = vec![0u8; ow * oh * 3];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for y in oy * f..((oy + 1) * f).min(h) {
                for x in ox * f..((ox + 1) * f).min(w) {
                    let i = (y * w + x) * 3;
                    for c in 0..3 {
                        sum[c] += u32::from(rgb[i + c]);
                    }
                    n += 1;
                }
            }
            for c in 0..3 {
                out[(oy * ow + ox) * 3 + c] = ((2 * sum[c] + n) / (2 * n)) as u8;
            }
        }
    }
    (out, ow as u32, oh as u32)
}

/// Same segmentation on a copy of the lowest level further reduced by `downsample`.
pub fn preview_tissue(p: &ImagePyramid, params: &TissueParams, downsample: u32) -> Result<TissueMask, TissueError> {
    if downsample == 0 {
        return Err(TissueError::Argument("downsample must be at least 1".into()));
    }
    let (rgb, w, h) = lowest_rgb(p)?;
    if downsample == 1 {
        return segment_rgb(&rgb, w, h, params);
    }
    let (small, sw, sh) = downsample_rgb(&rgb, w, h, downsample);
    segment_rgb(&small, sw, sh, params)
}

/// Gray level `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn gray(p: [u8; 3]) -> u8 {
    ((u32::from(p[0]) * 299 + u32::from(p[1]) * 587 + u32::from(p[2]) * 114 + 500) / 1000) as u8
}

pub fn gray_histogram(rgb: &[u8]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in rgb.chunks_exact(3) {
        hist[gray([p[0], p[1], p[2]]) as usize] += 1;
    }
    hist
}

/// Otsu's threshold: the `t` maximizing between-class variance, where class 0 is `v <= t`.
/// Candidates start at the darkest occupied bin and ties go to the smallest `t`, so a
/// histogram with a single occupied bin yields that bin. Scores are compared exactly.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8, TissueError> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(TissueError::Argument("empty histogram".into()));
    }
    let n = i128::from(total);
    let sum: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * i128::from(c)).sum();
    // With N0, S0 the count and intensity sum of class 0, N^2 times the between-class variance
    // is (N*S0 - N0*S)^2 / (N0*N1); compare those fractions by cross-multiplication.
    let mut best_t = hist.iter().position(|&c| c > 0).expect("non-empty") as u8;
    let mut best: (BigInt, BigInt) = (BigInt::from(0), BigInt::from(1));
    let (mut n0, mut s0) = (0i128, 0i128);
    for t in 0..256usize {
        n0 += i128::from(hist[t]);
        s0 += t as i128 * i128::from(hist[t]);
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = BigInt::from(n * s0 - n0 * sum);
        let num = &d * &d;
        let den = BigInt::from(n0) * BigInt::from(n1);
        if num.clone() * &best.1 > &best.0 * &den {
            best = (num, den);
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Alternative segmentation: gray levels at or below Otsu's threshold are tissue.
pub fn segment_tissue_otsu(p: &ImagePyramid, closing_radius: u32) -> Result<(TissueMask, u8), TissueError> {
    let (rgb, w, h) = lowest_rgb(p)?;
    let t = otsu_threshold(&gray_histogram(&rgb))?;
    let data = rgb.chunks_exact(3).map(|px| u8::from(gray([px[0], px[1], px[2]]) <= t)).collect();
    let raw = TissueMask { width: w, height: h, data };
    Ok((close(&raw, closing_radius), t))
}
