use super::Patch;
use crate::models::ModelDescriptor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear resampling with pixel centres aligned (`src = (dst + 0.5) * scale - 0.5`, clamped
/// to the border). Always samples the four nearest source pixels, whatever the scale.
pub fn resize_bilinear(src: &[u8], w: u32, h: u32, c: u8, ow: u32, oh: u32) -> Vec<f64> {
    let c = c as usize;
    let (w, h) = (w as usize, h as usize);
    let taps = |out: u32, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / f64::from(out);
        (0..out)
            .map(|o| {
                let s = ((f64::from(o) + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(ow, w);
    let ys = taps(oh, h);
    let mut out = Vec::with_capacity(ow as usize * oh as usize * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                let at = |x: usize, y: usize| f64::from(src[(y * w + x) * c + k]);
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn resize_bilinear_u8(src: &[u8], w: u32, h: u32, c: u8, ow: u32, oh: u32) -> Vec<u8> {
    resize_bilinear(src, w, h, c, ow, oh).into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

/// Nearest-neighbour resampling for label rasters.
pub fn resize_nearest(src: &[u8], w: u32, h: u32, ow: u32, oh: u32) -> Vec<u8> {
    let pick = |o: u32, inp: u32, out: u32| ((u64::from(o) * 2 + 1) * u64::from(inp) / (2 * u64::from(out))) as usize;
    let xs: Vec<usize> = (0..ow).map(|x| pick(x, w, ow)).collect();
    let mut out = Vec::with_capacity(ow as usize * oh as usize);
    for y in 0..oh {
        let row = pick(y, h, oh) * w as usize;
        out.extend(xs.iter().map(|&x| src[row + x]));
    }
    out
}

/// Resizes the patch to the model input (when the shapes differ) and scales intensities to
/// `v / 255`.
pub fn preprocess<S: Scalar>(patch: &Patch, d: &ModelDescriptor) -> Tensor<S> {
    let (w, h, c) = (patch.width(), patch.height(), patch.channels);
    let denom = S::from_f64_lossy(255.0);
    let data = if (w, h) == (d.input_width, d.input_height) {
        patch.pixels.iter().map(|&v| S::from_byte(v) / denom).collect()
    } else {
        resize_bilinear(&patch.pixels, w, h, c, d.input_width, d.input_height)
            .into_iter()
            .map(|v| S::from_f64_lossy(v / 255.0))
            .collect()
    };
    Tensor { width: d.input_width, height: d.input_height, channels: c, data }
}

/// Groups a stream into batches of `batch_size`, keeping order; the last batch may be short.
pub fn make_batches<I: Iterator>(items: I, batch_size: usize) -> Batches<I> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    Batches { items, batch_size }
}

pub struct Batches<I> {
    items: I,
    batch_size: usize,
}

impl<I: Iterator> Iterator for Batches<I> {
    type Item = Vec<I::Item>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch: Vec<_> = self.items.by_ref().take(self.batch_size).collect();
        (!batch.is_empty()).then_some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::builtin_descriptors;
    use crate::patchflow::PatchDescriptor;

    fn patch(size: u32, value: u8) -> Patch {
        let mut d = PatchDescriptor::for_test(0, 0, 0);
        d.patch_size = size;
        Patch { descriptor: d, channels: 3, pixels: vec![value; (size * size * 3) as usize] }
    }

    #[test]
    fn normalization_endpoints() {
        let mut d = builtin_descriptors()[1].clone();
        d.input_width = 4;
        d.input_height = 4;
        for (v, want) in [(0u8, 0.0), (255, 1.0), (128, 128.0 / 255.0)] {
            let t = preprocess::<f64>(&patch(4, v), &d);
            assert!(t.data.iter().all(|&x| x == want));
        }
        let t = preprocess::<f32>(&patch(4, 128), &d);
        assert!((t.data[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn resize_shape_and_constants() {
        let mut d = builtin_descriptors()[1].clone();
        d.input_width = 256;
        d.input_height = 256;
        let t = preprocess::<f32>(&patch(512, 77), &d);
        assert_eq!(t.shape(), (256, 256, 3));
        assert!(t.data.iter().all(|&x| (x - 77.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn bilinear_halves_and_interpolates() {
        // 2x1 gray to 4x1: centres at -0.25, 0.25, 0.75, 1.25
        let out = resize_bilinear(&[0, 100], 2, 1, 1, 4, 1);
        assert_eq!(out, vec![0.0, 25.0, 75.0, 100.0]);
        // 2x2 down to 1x1 samples the middle
        assert_eq!(resize_bilinear(&[10, 20, 30, 40], 2, 2, 1, 1, 1), vec![25.0]);
    }

    #[test]
    fn nearest_round_trip_on_integer_scale() {
        let src: Vec<u8> = (0..16).collect();
        let up = resize_nearest(&src, 4, 4, 8, 8);
        assert_eq!(resize_nearest(&up, 8, 8, 4, 4), src);
    }

    #[test]
    fn batching() {
        let sizes: Vec<usize> = make_batches(0..10, 4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let single: Vec<Vec<i32>> = make_batches(0..3, 1).collect();
        assert_eq!(single, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(make_batches(std::iter::empty::<u8>(), 3).count(), 0);
        let flat: Vec<i32> = make_batches(0..10, 3).flatten().collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }
}
