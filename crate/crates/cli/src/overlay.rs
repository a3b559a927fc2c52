//! Patch prediction overlays on a GED4 slice.

use anyhow::{bail, Result};

use fibro_core::clf::PatchPrediction;
use fibro_core::imgcore::percentile;
use fibro_core::Volume;

pub const ALPHA: f64 = 0.35;
pub const POSITIVE: [f64; 3] = [255.0, 0.0, 0.0];
pub const NEGATIVE: [f64; 3] = [0.0, 0.0, 255.0];

/// RGB pixels of slice `z`, row-major with `y` down. Grey levels are the
/// slice windowed to its 1st-99th percentile; every pixel covered by a
/// patch on this slice is blended with the mean colour of the covering
/// patches (red positive, blue negative) at [`ALPHA`].
pub fn render_rgb(vol: &Volume, preds: &[PatchPrediction], z: usize, patch_size: usize) -> Result<(usize, usize, Vec<u8>)> {
    let [nx, ny, nz] = vol.dims();
    if z >= nz {
        bail!("slice {z} out of range (volume has {nz} slices)");
    }
    let plane: Vec<f64> = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).map(|(x, y)| vol.get(x, y, z) as f64).collect();
    let mut sorted = plane.clone();
    let lo = percentile(&mut sorted, 1.0).unwrap_or(0.0);
    let hi = percentile(&mut sorted, 99.0).unwrap_or(1.0);
    let grey = |v: f64| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0 } else { 0.0 };

    let mut sum = vec![[0.0f64; 3]; nx * ny];
    let mut count = vec![0u32; nx * ny];
    for p in preds.iter().filter(|p| p.z == z) {
        let colour = if p.positive { POSITIVE } else { NEGATIVE };
        for y in p.y..(p.y + patch_size).min(ny) {
            for x in p.x..(p.x + patch_size).min(nx) {
                let i = y * nx + x;
                sum[i].iter_mut().zip(colour).for_each(|(s, c)| *s += c);
                count[i] += 1;
            }
        }
    }

    let mut rgb = Vec::with_capacity(nx * ny * 3);
    for i in 0..nx * ny {
        let g = grey(plane[i]);
        for c in 0..3 {
            let v = if count[i] == 0 {
                g
            } else {
                (1.0 - ALPHA) * g + ALPHA * sum[i][c] / count[i] as f64
            };
            rgb.push(v.round() as u8);
        }
    }
    Ok((nx, ny, rgb))
}

/// PNG bytes of [`render_rgb`], each pixel repeated `scale` times per axis.
pub fn render(vol: &Volume, preds: &[PatchPrediction], z: usize, patch_size: usize, scale: u32) -> Result<Vec<u8>> {
    if scale == 0 {
        bail!("scale must be at least 1");
    }
    let (w, h, rgb) = render_rgb(vol, preds, z, patch_size)?;
    let s = scale as usize;
    let mut big = Vec::with_capacity(rgb.len() * s * s);
    for y in 0..h {
        let row = &rgb[y * w * 3..(y + 1) * w * 3];
        let mut line = Vec::with_capacity(row.len() * s);
        for px in row.chunks(3) {
            for _ in 0..s {
                line.extend_from_slice(px);
            }
        }
        for _ in 0..s {
            big.extend_from_slice(&line);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, (w * s) as u32, (h * s) as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&big)?;
        writer.finish()?;
    }
    Ok(out)
}
