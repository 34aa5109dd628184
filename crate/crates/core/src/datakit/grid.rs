//! PNG grids of synthetic images: one row per class, one column per image.
//!
//! Rows are de-normalized and clipped to `[0, 1]`. One channel renders as
//! gray, two channels as `(c0, c1, (c0 + c1) / 2)`, three or more use the
//! first three as RGB.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::datakit::{denormalize_row, NormStats};
use crate::diffnet::{InputShape, Mat};
use crate::distill::SyntheticDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub classes: usize,
    pub ipc: usize,
    pub shape: InputShape,
    /// Pixels per image pixel along each axis.
    pub scale: usize,
}

impl GridLayout {
    pub fn for_synthetic(syn: &SyntheticDataset, scale: usize) -> Self {
        Self {
            classes: syn.classes(),
            ipc: syn.ipc(),
            shape: syn.layout(),
            scale,
        }
    }

    pub fn cell_height(&self) -> usize {
        self.shape.height * self.scale
    }

    pub fn cell_width(&self) -> usize {
        self.shape.width * self.scale
    }
}

/// RGB raster with display values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl GridImage {
    fn blank(width: usize, height: usize, fill: f64) -> Self {
        Self {
            width,
            height,
            rgb: vec![fill; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(to_io)?;
        writer.write_image_data(&self.to_rgb8()).map_err(to_io)?;
        writer.finish().map_err(to_io)
    }

    fn blit(&mut self, other: &GridImage, x0: usize) {
        for y in 0..other.height {
            let src = &other.rgb[y * other.width * 3..(y + 1) * other.width * 3];
            let o = (y * self.width + x0) * 3;
            self.rgb[o..o + src.len()].copy_from_slice(src);
        }
    }
}

fn pixel_rgb(row: &[f64], shape: InputShape, p: usize) -> [f64; 3] {
    let hw = shape.height * shape.width;
    let ch = |c: usize| row[c * hw + p].clamp(0.0, 1.0);
    match shape.channels {
        1 => [ch(0); 3],
        2 => [ch(0), ch(1), 0.5 * (ch(0) + ch(1))],
        _ => [ch(0), ch(1), ch(2)],
    }
}

/// Render `images` (class-major rows) into a grid.
pub fn render_grid(images: &Mat, norm: Option<&NormStats>, layout: &GridLayout) -> Result<GridImage> {
    let GridLayout {
        classes,
        ipc,
        shape,
        scale,
    } = *layout;
    if scale == 0 || shape.channels == 0 {
        return Err(Error::Layout("grid scale and channel count must be ≥ 1".into()));
    }
    if images.cols() != shape.dim() {
        return Err(Error::Layout(format!(
            "rows of {} values cannot be reshaped to {}x{}x{}",
            images.cols(),
            shape.channels,
            shape.height,
            shape.width
        )));
    }
    if images.rows() != classes * ipc {
        return Err(Error::Layout(format!(
            "{} rows do not fill a {classes}x{ipc} grid",
            images.rows()
        )));
    }
    if let Some(n) = norm {
        if n.mean.len() != shape.channels || n.std.len() != shape.channels {
            return Err(Error::Layout(format!(
                "normalization stats cover {} channels, layout has {}",
                n.mean.len(),
                shape.channels
            )));
        }
    }
    let (ch, cw) = (layout.cell_height(), layout.cell_width());
    let mut img = GridImage::blank(ipc * cw, classes * ch, 0.0);
    for r in 0..images.rows() {
        let row = match norm {
            Some(n) => denormalize_row(images.row(r), n, shape),
            None => images.row(r).to_vec(),
        };
        let (gy, gx) = (r / ipc, r % ipc);
        for y in 0..ch {
            for x in 0..cw {
                let p = (y / scale) * shape.width + x / scale;
                let px = pixel_rgb(&row, shape, p);
                let o = ((gy * ch + y) * img.width + gx * cw + x) * 3;
                img.rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    Ok(img)
}

pub fn export_image_grid(syn: &SyntheticDataset, path: &Path, scale: usize) -> Result<GridImage> {
    let img = render_grid(syn.images(), syn.norm(), &GridLayout::for_synthetic(syn, scale))?;
    img.write_png(path)?;
    Ok(img)
}

/// Initial grid on the left, final on the right, separated by a white band
/// `scale` pixels wide.
pub fn export_comparison_grid(
    initial: &SyntheticDataset,
    fin: &SyntheticDataset,
    path: &Path,
    scale: usize,
) -> Result<(GridImage, GridImage)> {
    let layout = GridLayout::for_synthetic(fin, scale);
    if GridLayout::for_synthetic(initial, scale) != layout {
        return Err(Error::Layout(
            "initial and final synthetic sets have different layouts".into(),
        ));
    }
    let a = render_grid(initial.images(), initial.norm(), &layout)?;
    let b = render_grid(fin.images(), fin.norm(), &layout)?;
    let mut both = GridImage::blank(2 * a.width + scale, a.height, 1.0);
    both.blit(&a, 0);
    both.blit(&b, a.width + scale);
    both.write_png(path)?;
    Ok((a, b))
}

/// Mean absolute difference of display values over all pixels and channels.
pub fn mean_abs_pixel_delta(a: &GridImage, b: &GridImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Layout(format!(
            "grids differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let total: f64 = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.rgb.len().max(1) as f64)
}
