use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use engine::Graph;
use kpose::model::{Mode, Model};
use kpose::nn::{Bound, ParamStore};
use kpose::so3::Rotation;
use kpose::synthdata::{to_pixel, SamplePair};

use crate::error::{io_err, HarnessError, Result};

pub const BLUE: [u8; 3] = [40, 90, 255];
pub const GREEN: [u8; 3] = [30, 220, 60];

/// An 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; 3 * width * height] }
    }

    /// From a planar `[3, S, S]` image with values in [0, 1].
    pub fn from_chw(chw: &[f32], size: usize) -> Self {
        let n = size * size;
        let mut pm = Self::new(size, size);
        for pix in 0..n {
            for c in 0..3 {
                pm.rgb[3 * pix + c] = (chw[c * n + pix].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        pm
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_ppm()).map_err(io_err(path))
    }
}

/// Reads back a binary PPM written by [`Pixmap::to_ppm`].
pub fn parse_ppm(bytes: &[u8]) -> Result<Pixmap> {
    let bad = || HarnessError::Data("not a binary P6 pixmap".into());
    let mut fields = Vec::new();
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
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (width, height) = (num(&fields[1])?, num(&fields[2])?);
    let rgb = bytes.get(pos..pos + 3 * width * height).ok_or_else(bad)?.to_vec();
    Ok(Pixmap { width, height, rgb })
}

/// Blends a per-cell heatmap (normalised to its peak) into the red channel of `base`.
pub fn heatmap_overlay(base: &Pixmap, heat: &[f64], grid: usize) -> Pixmap {
    let peak = heat.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut out = base.clone();
    for y in 0..base.height {
        for x in 0..base.width {
            let cell = (y * grid / base.height) * grid + x * grid / base.width;
            let a = (heat[cell] / peak).clamp(0.0, 1.0) * 0.7;
            let [r, g, b] = base.get(x, y);
            let mix = |v: u8, t: f64| ((1.0 - a) * v as f64 + a * t).round() as u8;
            out.put(x, y, [mix(r, 255.0), mix(g, 0.0), mix(b, 0.0)]);
        }
    }
    out
}

fn line(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut pts = vec![(x, y)];
    while (x, y) != (x1, y1) {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        pts.push((x, y));
    }
    pts
}

/// Pixels covered by the three object axes of `r_q` projected from the image centre.
pub fn arrow_pixels(r_q: &Rotation, size: usize) -> BTreeSet<(usize, usize)> {
    let m = r_q.matrix();
    let c = size as f64 / 2.0;
    let mut set = BTreeSet::new();
    for k in 0..3 {
        let tip = (to_pixel(0.8 * m[(0, k)], size), to_pixel(0.8 * m[(1, k)], size));
        for (x, y) in line(c as i64, c as i64, tip.0.round() as i64, tip.1.round() as i64) {
            if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                set.insert((x as usize, y as usize));
            }
        }
    }
    set
}

/// Ground-truth axes in blue, then the prediction `R_q = ΔR⁻¹·R_r` in green on top.
pub fn pose_image(base: &Pixmap, sample: &SamplePair, predicted_delta: &Rotation) -> Pixmap {
    let mut out = base.clone();
    let pred_q = predicted_delta.inverse().compose(&sample.r_r);
    for (rot, colour) in [(sample.r_q, BLUE), (pred_q, GREEN)] {
        for (x, y) in arrow_pixels(&rot, base.width) {
            out.put(x, y, colour);
        }
    }
    out
}

/// Writes heatmap overlays, inputs, reconstructions and the pose-arrow image for one pair.
pub fn visualize(model: &Model, params: &ParamStore<f32>, sample: &SamplePair, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let s = sample.size;
    let g = Graph::<f32>::new();
    let p = Bound::new(&g, params, false);
    let out = model.forward_pair(&p, sample, Mode::Infer { reconstruct: true }, sample.id as u64)?;
    let input_q = Pixmap::from_chw(&sample.img_q, s);
    let input_r = Pixmap::from_chw(&sample.img_r, s);
    let recon = |v: Option<engine::Var<'_, f32>>| Pixmap::from_chw(v.expect("reconstruction requested").value().data(), s);

    let mut images = vec![
        ("input_q.ppm".to_string(), input_q.clone()),
        ("input_r.ppm".to_string(), input_r),
        ("recon_q.ppm".to_string(), recon(out.recon_q)),
        ("recon_r.ppm".to_string(), recon(out.recon_r)),
    ];
    let heat = out.kp_q.heatmaps.value();
    let cells = heat.shape()[1];
    let grid = (cells as f64).sqrt().round() as usize;
    for (k, row) in heat.data().chunks(cells).enumerate() {
        let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        images.push((format!("heatmap_{k:02}.ppm"), heatmap_overlay(&input_q, &row, grid)));
    }
    let predicted = match out.rotation() {
        Ok(r) => r,
        Err(e) if e.is_degenerate() => Rotation::identity(),
        Err(e) => return Err(e.into()),
    };
    images.push(("pose.ppm".to_string(), pose_image(&input_q, sample, &predicted)));

    let mut paths = Vec::with_capacity(images.len());
    for (name, pm) in images {
        let path = out_dir.join(name);
        pm.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
