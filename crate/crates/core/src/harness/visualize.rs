use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::write_attention_raster;
use crate::backbone::VideoClip;
use crate::data::{sample_clip, SamplingMode, SamplingProtocol, Video};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;

/// Blend weight of the heatmap over the frame.
pub const OVERLAY_ALPHA: f32 = 0.5;
/// Every second frame goes into the figure.
pub const FRAME_STEP: usize = 2;

/// Jet colour map on `[0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f32| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn clip_frame(clip: &VideoClip, t: usize) -> RgbImage {
    let (h, w) = (clip.height(), clip.width());
    let plane = h * w;
    let d = clip.frames().slab(t);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * plane + i] * 255.0).round() as u8))
    })
}

/// Upsample a `map_h × map_w` map to the frame and alpha-blend its jet
/// colours over it. The map is shown as is, without renormalization.
pub fn overlay(frame: &RgbImage, map: &[f32], map_h: usize, map_w: usize) -> Result<RgbImage> {
    if map.len() != map_h * map_w {
        return Err(Error::Shape(format!(
            "{} map values for {map_h}x{map_w}",
            map.len()
        )));
    }
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(map_w as u32, map_h as u32, map.to_vec()).expect("size checked");
    let (w, h) = frame.dimensions();
    let up = if (w, h) == (map_w as u32, map_h as u32) {
        small
    } else {
        imageops::resize(&small, w, h, FilterType::Triangle)
    };
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let heat = jet(up.get_pixel(x, y).0[0]);
        let px = frame.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|c| {
            let v = (1.0 - OVERLAY_ALPHA) * px[c] as f32 / 255.0 + OVERLAY_ALPHA * heat[c];
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visualization {
    pub grid: PathBuf,
    pub rasters: Vec<PathBuf>,
    /// Rows in the grid, one per head.
    pub rows: usize,
    pub columns: usize,
}

/// Render the validation clip of `video`: `grid.png` holds one overlay row
/// per head over every second frame, `frames.png` the same frames without
/// overlay, and each head's raw maps go to `<head>.attn` rasters.
pub fn visualize(
    model: &Model,
    store: &ParamStore<f32>,
    video: &Video,
    protocol: &SamplingProtocol,
    out_dir: &Path,
) -> Result<Visualization> {
    let protocol = protocol.with_mode(SamplingMode::Validation);
    let s = sample_clip(video, &protocol, &mut ChaCha8Rng::seed_from_u64(0))?;
    let pred = model.predict(store, &s.clip)?;
    let (t, mh, mw) = pred.maps.dims();
    let frames: Vec<usize> = (0..t).step_by(FRAME_STEP).collect();
    let (fh, fw) = (s.clip.height() as u32, s.clip.width() as u32);
    let rows = pred.maps.num_heads();
    let mut grid = RgbImage::new(fw * frames.len() as u32, fh * rows as u32);
    let mut strip = RgbImage::new(fw * frames.len() as u32, fh);
    for (col, &f) in frames.iter().enumerate() {
        let x = (col as u32 * fw) as i64;
        let frame = clip_frame(&s.clip, f);
        imageops::replace(&mut strip, &frame, x, 0);
        for head in 0..rows {
            let map = pred.maps.head(head);
            let plane = mh * mw;
            let img = overlay(&frame, &map.data()[f * plane..(f + 1) * plane], mh, mw)?;
            imageops::replace(&mut grid, &img, x, (head as u32 * fh) as i64);
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let grid_path = out_dir.join("grid.png");
    for (img, path) in [
        (&grid, grid_path.clone()),
        (&strip, out_dir.join("frames.png")),
    ] {
        img.save(&path)
            .map_err(|e| Error::Image { path, source: e })?;
    }
    let mut rasters = Vec::new();
    for (i, role) in pred.maps.roles().iter().enumerate() {
        let path = out_dir.join(format!("{}.attn", role.label()));
        write_attention_raster(&path, &pred.maps.head(i))?;
        rasters.push(path);
    }
    Ok(Visualization {
        grid: grid_path,
        rasters,
        rows,
        columns: frames.len(),
    })
}
