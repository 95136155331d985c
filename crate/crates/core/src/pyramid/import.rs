use std::path::Path;

use super::{create_pyramid, ImagePyramid, PyramidError, PyramidPolicy};

/// Averages a 2x2 neighbourhood of one channel, rounding half up. Blocks clipped by the image
/// border average over the pixels that exist.
#[inline]
fn box_average(sum: u32, count: u32) -> u8 {
    ((2 * sum + count) / (2 * count)) as u8
}

/// Halves an interleaved raster with a 2x2 box filter. Output is `ceil(w/2) x ceil(h/2)`.
pub fn downsample_box(src: &[u8], width: u32, height: u32, channels: u8) -> (Vec<u8>, u32, u32) {
    let (ow, oh) = (width.div_ceil(2), height.div_ceil(2));
    let c = channels as usize;
    let mut out = vec![0u8; ow as usize * oh as usize * c];
    downsample_rows(src, width, height, channels, &mut out, 0, oh);
    (out, ow, oh)
}

fn downsample_rows(
    src: &[u8],
    width: u32,
    height: u32,
    channels: u8,
    out: &mut [u8],
    row_start: u32,
    row_end: u32,
) {
    let c = channels as usize;
    let ow = width.div_ceil(2) as usize;
    let stride = width as usize * c;
    for oy in row_start..row_end {
        let y0 = 2 * oy as usize;
        let y1 = (y0 + 1).min(height as usize - 1);
        let rows = if y1 == y0 { 1 } else { 2 };
        for ox in 0..ow {
            let x0 = 2 * ox;
            let x1 = (x0 + 1).min(width as usize - 1);
            let cols = if x1 == x0 { 1 } else { 2 };
            for ch in 0..c {
                let mut sum = u32::from(src[y0 * stride + x0 * c + ch]);
                if cols == 2 {
                    sum += u32::from(src[y0 * stride + x1 * c + ch]);
                }
                if rows == 2 {
                    sum += u32::from(src[y1 * stride + x0 * c + ch]);
                    if cols == 2 {
                        sum += u32::from(src[y1 * stride + x1 * c + ch]);
                    }
                }
                out[(oy as usize - row_start as usize) * ow * c + ox * c + ch] = box_average(sum, rows * cols);
            }
        }
    }
}

/// Regenerates every level above `from_level` of a raster pyramid by repeated box
/// downsampling.
pub fn rebuild_levels(pyramid: &ImagePyramid, from_level: u32) -> Result<(), PyramidError> {
    if !pyramid.is_writable() {
        return Err(PyramidError::ReadOnly);
    }
    let channels = pyramid.channels();
    for l in from_level..pyramid.lowest_level() {
        let (w, h) = pyramid.level_dims(l).expect("level exists");
        pyramid
            .with_level_bytes(l, |src| {
                pyramid.with_level_bytes_mut(l + 1, |dst| {
                    let oh = h.div_ceil(2);
                    downsample_rows(src, w, h, channels, dst, 0, oh);
                })
            })
            .flatten()
            .expect("raster levels");
    }
    Ok(())
}

/// Loads a flat raster image (any format the `image` crate decodes) into a new pyramid.
///
/// Grayscale inputs stay single-channel; everything else is converted to RGB.
pub fn import_flat_image(
    path: impl AsRef<Path>,
    policy: &PyramidPolicy,
    base_magnification: f64,
) -> Result<ImagePyramid, PyramidError> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| PyramidError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| PyramidError::io(path, e))?
        .decode()
        .map_err(|e| PyramidError::Format(format!("{}: {e}", path.display())))?;
    let (channels, width, height, pixels) = match img.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => {
            let g = img.into_luma8();
            (1u8, g.width(), g.height(), g.into_raw())
        }
        _ => {
            let rgb = img.into_rgb8();
            (3u8, rgb.width(), rgb.height(), rgb.into_raw())
        }
    };
    let pyramid =
        create_pyramid(width, height, channels, policy)?.with_base_magnification(base_magnification);
    pyramid.write_region(0, 0, 0, width, height, &pixels)?;
    rebuild_levels(&pyramid, 0)?;
    Ok(pyramid)
}
