//! Attention heatmaps and flow arrows over clip frames, written as
//! PGM/PPM images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::VideoClip;
use crate::error::{MooseError, Result};
use crate::flow::{frames_flow, luminance};
use crate::fusion::{FLOW_PRIOR_TAG, VISUAL_PRIOR_TAG};
use crate::model::Moose;
use crate::params::{AttentionRecord, Ctx};
use crate::patching::PatchGrid;
use crate::tensor::Tensor;

/// Which fusion direction a heatmap comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatSource {
    /// Spatial cls query over flow patches.
    Spatial,
    /// Flow cls query over spatial patches.
    Flow,
}

impl HeatSource {
    pub fn name(self) -> &'static str {
        match self {
            HeatSource::Spatial => "spatial",
            HeatSource::Flow => "flow",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            HeatSource::Spatial => FLOW_PRIOR_TAG,
            HeatSource::Flow => VISUAL_PRIOR_TAG,
        }
    }
}

/// Head-averaged cls-query attention over the `N` patch keys (row 0,
/// columns `1..=N`) for frame `t`.
pub fn extract_cls_attention(
    records: &[AttentionRecord],
    source: HeatSource,
    t: usize,
) -> Result<Tensor> {
    let rows: Vec<&AttentionRecord> = records
        .iter()
        .filter(|r| r.purpose == source.tag() && r.sequence == t)
        .collect();
    let first = rows.first().ok_or_else(|| {
        MooseError::NoTrace(format!(
            "no {} attention recorded for frame {t}",
            source.name()
        ))
    })?;
    let (_, cols) = first.weights.dims2()?;
    if cols < 2 {
        return Err(MooseError::invalid("attention has no patch keys"));
    }
    let mut out = vec![0.0; cols - 1];
    for r in &rows {
        for (o, w) in out.iter_mut().zip(&r.weights.row(0)[1..]) {
            *o += w;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Tensor::new(&[cols - 1], out)
}

/// Min-max normalisation to `[0, 1]`; a constant input maps to all zeros.
/// Also returns the original `(min, max)`.
pub fn normalize_minmax(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let out = if span > 0.0 {
        values.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![0.0; values.len()]
    };
    (out, min, max)
}

/// Bilinear sample of a row-major `gw × gh` grid at continuous grid
/// coordinates, clamped to the grid.
pub fn bilinear_at(grid: &[f64], gw: usize, gh: usize, fx: f64, fy: f64) -> f64 {
    let fx = fx.clamp(0.0, (gw - 1) as f64);
    let fy = fy.clamp(0.0, (gh - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let g = |x: usize, y: usize| grid[y * gw + x];
    (1.0 - ay) * ((1.0 - ax) * g(x0, y0) + ax * g(x1, y0))
        + ay * ((1.0 - ax) * g(x0, y1) + ax * g(x1, y1))
}

/// Grid coordinate of a pixel. Grid node `i` sits on pixel `P·i + P/2`, so
/// every patch contains the pixel that carries its value exactly.
fn grid_coord(pixel: usize, patch: usize) -> f64 {
    (pixel as f64 - (patch / 2) as f64) / patch as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// `[H × W]` in `[0, 1]`.
    pub values: Tensor,
    /// Raw attention range before normalisation.
    pub min: f64,
    pub max: f64,
}

/// Normalises `attn` `[N]`, lays it on the patch grid and interpolates to
/// frame resolution.
pub fn render_heatmap(attn: &Tensor, grid: PatchGrid) -> Result<HeatMap> {
    let n = grid.num_patches();
    if attn.numel() != n {
        return Err(MooseError::shape("heatmap", attn.shape(), &[n]));
    }
    let (norm, min, max) = normalize_minmax(attn.data());
    let (w, h, p) = (grid.width(), grid.height(), grid.patch);
    let values = Tensor::from_fn(&[h, w], |k| {
        let (x, y) = (k % w, k / w);
        bilinear_at(
            &norm,
            grid.grid_w,
            grid.grid_h,
            grid_coord(x, p),
            grid_coord(y, p),
        )
        .clamp(0.0, 1.0)
    });
    Ok(HeatMap { values, min, max })
}

/// Colour image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3)
            || width == 0
            || height == 0
            || data.len() != width * height * channels
        {
            return Err(MooseError::invalid(format!(
                "image {width}x{height}x{channels} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], coverage: f64) {
        let i = (y * self.width + x) * self.channels;
        for c in 0..self.channels {
            let target = if self.channels == 1 {
                color[0]
            } else {
                color[c]
            };
            let v = &mut self.data[i + c];
            *v = (1.0 - coverage) * *v + coverage * target;
        }
    }
}

/// 256-entry blue→red lookup table.
pub fn colormap(index: u8) -> [u8; 3] {
    let i = index as i32;
    [i as u8, (255 - (2 * i - 255).abs()) as u8, (255 - i) as u8]
}

fn heat_color(h: f64) -> [f64; 3] {
    let c = colormap((h.clamp(0.0, 1.0) * 255.0).round() as u8);
    c.map(|v| v as f64 / 255.0)
}

/// `(1 − α)·gray(frame) + α·colormap(heat)` for a `[C × H × W]` frame.
pub fn overlay(frame: &Tensor, heat: &HeatMap, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MooseError::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let gray = luminance(frame)?;
    let (h, w) = heat.values.dims2()?;
    if frame.shape()[1..] != [h, w] {
        return Err(MooseError::shape(
            "overlay",
            frame.shape(),
            heat.values.shape(),
        ));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for (g, &v) in gray.iter().zip(heat.values.data()) {
        let c = heat_color(v);
        for ch in c {
            data.push((1.0 - alpha) * g + alpha * ch);
        }
    }
    Image::new(w, h, 3, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arrow {
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub v: f64,
}

/// Arrows on a regular grid of pitch `step` (anchors at `step/2 + k·step`)
/// from a `[2 × H × W]` flow, scaled by `scale`.
pub fn sample_arrows(flow: &Tensor, step: usize, scale: f64) -> Result<Vec<Arrow>> {
    let &[2, h, w] = flow.shape() else {
        return Err(MooseError::InvalidShape {
            shape: flow.shape().to_vec(),
            reason: "expected a [2 x H x W] flow".into(),
        });
    };
    if step == 0 {
        return Err(MooseError::invalid("arrow grid step must be >= 1"));
    }
    let d = flow.data();
    let mut out = Vec::new();
    for y in (step / 2..h).step_by(step) {
        for x in (step / 2..w).step_by(step) {
            out.push(Arrow {
                x: x as f64,
                y: y as f64,
                u: d[y * w + x] * scale,
                v: d[h * w + y * w + x] * scale,
            });
        }
    }
    Ok(out)
}

fn plot(img: &mut Image, x: i64, y: i64, color: [f64; 3], coverage: f64) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height && coverage > 0.0 {
        img.blend(x as usize, y as usize, color, coverage.min(1.0));
    }
}

/// Anti-aliased (Wu) line; a zero-length segment marks one pixel.
pub fn draw_line(img: &mut Image, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [f64; 3]) {
    if (x1 - x0).abs() < 1e-12 && (y1 - y0).abs() < 1e-12 {
        plot(img, x0.round() as i64, y0.round() as i64, color, 1.0);
        return;
    }
    let steep = (y1 - y0).abs() > (x1 - x0).abs();
    let (mut x0, mut y0, mut x1, mut y1) = if steep {
        (y0, x0, y1, x1)
    } else {
        (x0, y0, x1, y1)
    };
    if x0 > x1 {
        std::mem::swap(&mut x0, &mut x1);
        std::mem::swap(&mut y0, &mut y1);
    }
    let gradient = (y1 - y0) / (x1 - x0);
    let mut put = |a: i64, b: i64, c: f64| {
        if steep {
            plot(img, b, a, color, c)
        } else {
            plot(img, a, b, color, c)
        }
    };
    let (xs, xe) = (x0.round() as i64, x1.round() as i64);
    for x in xs..=xe {
        let y = y0 + gradient * (x as f64 - x0);
        let yf = y.floor();
        let frac = y - yf;
        put(x, yf as i64, 1.0 - frac);
        put(x, yf as i64 + 1, frac);
    }
}

pub const ARROW_COLOR: [f64; 3] = [1.0, 1.0, 1.0];

pub fn overlay_arrows(img: &mut Image, arrows: &[Arrow]) {
    for a in arrows {
        draw_line(img, (a.x, a.y), (a.x + a.u, a.y + a.v), ARROW_COLOR);
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (`P5`) for gray images, PPM (`P6`) for colour, maxval 255.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    fs::write(path, encode_image(img))?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |reason: &str| MooseError::Image {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let raster = bytes
        .get(pos..pos + w * h * channels)
        .ok_or_else(|| bad("truncated raster"))?;
    Image::new(
        w,
        h,
        channels,
        raster.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Settings for [`render_clip`].
#[derive(Clone, Debug)]
pub struct VizOptions {
    pub alpha: f64,
    pub arrow_step: usize,
    pub arrow_scale: f64,
}

impl Default for VizOptions {
    fn default() -> Self {
        VizOptions {
            alpha: 0.5,
            arrow_step: 4,
            arrow_scale: 2.0,
        }
    }
}

/// Runs a traced forward on `clip` and writes
/// `<out>/<clip_id>/frame_<t>_{spatial|flow}.ppm` for every fusion
/// direction the model has, plus `meta.csv` with raw attention ranges.
pub fn render_clip(
    model: &Moose,
    clip: &VideoClip,
    out: impl AsRef<Path>,
    opts: &VizOptions,
) -> Result<Vec<PathBuf>> {
    let cfg = &model.config;
    let prepared = model.prepare(clip)?;
    let mut ctx = Ctx::traced(&model.store);
    model.forward(&mut ctx, &[&prepared])?;
    let records = ctx.take_trace().unwrap_or_default();
    let flows = frames_flow(&clip.frames, &cfg.flow)?;
    let grid = PatchGrid::new(cfg.width, cfg.height, cfg.patch)?;

    let dir = out.as_ref().join(&clip.id);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut meta = String::from("frame,source,min,max\n");
    for t in 0..cfg.frames {
        let frame = clip.frames.slab(t)?;
        for source in [HeatSource::Spatial, HeatSource::Flow] {
            let attn = match extract_cls_attention(&records, source, t) {
                Ok(a) => a,
                Err(MooseError::NoTrace(_)) => continue,
                Err(e) => return Err(e),
            };
            let heat = render_heatmap(&attn, grid)?;
            let mut img = overlay(&frame, &heat, opts.alpha)?;
            if source == HeatSource::Flow {
                let arrows = sample_arrows(&flows.pair(t)?, opts.arrow_step, opts.arrow_scale)?;
                overlay_arrows(&mut img, &arrows);
            }
            let path = dir.join(format!("frame_{t}_{}.ppm", source.name()));
            write_image(&path, &img)?;
            let _ = writeln!(meta, "{t},{},{},{}", source.name(), heat.min, heat.max);
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(MooseError::NoTrace(
            "the forward recorded no fusion attention".into(),
        ));
    }
    fs::write(dir.join("meta.csv"), meta)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_exact() {
        let img = Image::new(2, 2, 1, vec![1.0; 4]).unwrap();
        let mut expected = b"P5\n2 2\n255\n".to_vec();
        expected.extend([0xFF; 4]);
        assert_eq!(encode_image(&img), expected);
    }

    #[test]
    fn ppm_red_pixel() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let bytes = encode_image(&img);
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(&bytes[11..], &[0xFF, 0x00, 0x00]);
    }

    #[test]
    fn image_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 5 * 4).map(|k| (k as f64 * 0.137).fract()).collect();
        let img = Image::new(5, 4, 3, data).unwrap();
        let path = dir.path().join("x.ppm");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!((back.width, back.height, back.channels), (5, 4, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0), [0, 0, 255]);
        assert_eq!(colormap(255), [255, 0, 0]);
        assert_eq!(colormap(128)[1], 254);
    }

    #[test]
    fn overlay_alpha_extremes() {
        let frame = Tensor::from_fn(&[1, 2, 2], |k| k as f64 / 4.0);
        let heat = HeatMap {
            values: Tensor::from_fn(&[2, 2], |k| k as f64 / 3.0),
            min: 0.0,
            max: 1.0,
        };
        let img = overlay(&frame, &heat, 0.0).unwrap();
        for (k, px) in img.data.chunks(3).enumerate() {
            assert!(px.iter().all(|&v| v == k as f64 / 4.0));
        }
        let img = overlay(&frame, &heat, 1.0).unwrap();
        for (k, px) in img.data.chunks(3).enumerate() {
            assert_eq!(px, heat_color(k as f64 / 3.0));
        }
        assert!(overlay(&frame, &heat, 1.5).is_err());
    }

    #[test]
    fn zero_arrow_marks_anchor_only() {
        let mut img = Image::new(5, 5, 3, vec![0.0; 75]).unwrap();
        overlay_arrows(
            &mut img,
            &[Arrow {
                x: 2.0,
                y: 3.0,
                u: 0.0,
                v: 0.0,
            }],
        );
        let lit: Vec<(usize, usize)> = (0..25)
            .filter(|k| img.pixel(k % 5, k / 5)[0] > 0.0)
            .map(|k| (k % 5, k / 5))
            .collect();
        assert_eq!(lit, vec![(2, 3)]);
    }

    #[test]
    fn horizontal_arrow_covers_segment() {
        let mut img = Image::new(6, 3, 1, vec![0.0; 18]).unwrap();
        draw_line(&mut img, (1.0, 1.0), (4.0, 1.0), [1.0; 3]);
        for x in 1..=4 {
            assert_eq!(img.pixel(x, 1)[0], 1.0);
        }
        assert_eq!(img.pixel(0, 1)[0], 0.0);
        assert_eq!(img.pixel(5, 1)[0], 0.0);
    }

    #[test]
    fn arrows_sample_flow() {
        let flow = Tensor::from_fn(&[2, 8, 8], |k| if k < 64 { 1.0 } else { -0.5 });
        let arrows = sample_arrows(&flow, 4, 2.0).unwrap();
        assert_eq!(arrows.len(), 4);
        assert_eq!(
            arrows[0],
            Arrow {
                x: 2.0,
                y: 2.0,
                u: 2.0,
                v: -1.0
            }
        );
    }
}
