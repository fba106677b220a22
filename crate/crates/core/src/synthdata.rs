//! Procedural coloured point-cloud objects, an orthographic z-buffered splat
//! renderer, and the on-disk pair dataset.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::so3::{random_rotation, random_rotation_in_range, Rotation};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
/// Largest point norm after normalisation.
const OBJECT_RADIUS: f64 = 0.92;
const SPLIT_OFFSET: u64 = 1 << 31;

/// Surface points with per-point colours; `splat_radius` is in normalised
/// image units (the image spans `[−1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub part_of: Vec<usize>,
    pub splat_radius: f64,
}

impl SyntheticObject {
    pub fn rotated(&self, r: &Rotation) -> Self {
        Self { points: self.points.iter().map(|p| r.apply(*p)).collect(), ..self.clone() }
    }

    pub fn n_parts(&self) -> usize {
        self.part_of.iter().max().map_or(0, |m| m + 1)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Box { half: [f64; 3] },
    Ellipsoid { radii: [f64; 3] },
    Rod { half_len: f64, radius: f64 },
}

impl Primitive {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        match rng.gen_range(0..3) {
            0 => Primitive::Box { half: std::array::from_fn(|_| rng.gen_range(0.12..0.45)) },
            1 => Primitive::Ellipsoid { radii: std::array::from_fn(|_| rng.gen_range(0.12..0.4)) },
            _ => Primitive::Rod { half_len: rng.gen_range(0.3..0.6), radius: rng.gen_range(0.04..0.08) },
        }
    }

    /// A surface point in the primitive's local frame.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        match *self {
            Primitive::Box { half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let mut p: [f64; 3] = std::array::from_fn(|k| rng.gen_range(-half[k]..=half[k]));
                p[axis] = if rng.gen::<bool>() { half[axis] } else { -half[axis] };
                Vector3::from(p)
            }
            Primitive::Ellipsoid { radii } => unit_vector(rng).component_mul(&Vector3::from(radii)),
            Primitive::Rod { half_len, radius } => {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Vector3::new(radius * a.cos(), radius * a.sin(), rng.gen_range(-half_len..=half_len))
            }
        }
    }
}

/// Two to four coloured primitives, centred and scaled into the unit ball.
pub fn make_object(seed: u64) -> SyntheticObject {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_parts = rng.gen_range(2..=4);
    let total = rng.gen_range(200..=600usize);
    let hue0 = rng.gen::<f64>();

    let mut points = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    let mut part_of = Vec::with_capacity(total);
    for part in 0..n_parts {
        let count = total / n_parts + usize::from(part < total % n_parts);
        let prim = Primitive::random(&mut rng);
        let orient = random_rotation(&mut rng);
        let center = unit_vector(&mut rng) * rng.gen_range(0.15..0.5);
        let hue = hue0 + part as f64 / n_parts as f64 + rng.gen_range(-0.04..0.04);
        let base = hsv_to_rgb(hue, rng.gen_range(0.6..0.95), rng.gen_range(0.75..1.0));
        let shade_dir = unit_vector(&mut rng);
        for _ in 0..count {
            let local = prim.sample(&mut rng);
            let shade = 0.65 + 0.35 * (0.5 + 0.5 * local.normalize().dot(&shade_dir));
            let p = orient.matrix() * local + center;
            points.push(p);
            colors.push(base.map(|c| (c * shade).clamp(0.0, 1.0)));
            part_of.push(part);
        }
    }

    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64;
    let max_norm = points.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max).max(1e-9);
    let scale = OBJECT_RADIUS / max_norm;
    let points: Vec<[f64; 3]> = points
        .iter()
        .map(|p| {
            let q = (p - centroid) * scale;
            [q.x, q.y, q.z]
        })
        .collect();
    let splat_radius = (0.06 * (300.0 / total as f64).sqrt()).clamp(0.035, 0.075);
    SyntheticObject { points, colors, part_of, splat_radius }
}

/// Image `[3, S, S]`, mask and depth `[S, S]` (background depth `+∞`), and the
/// index of the point drawn at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<f32>,
    pub depth: Vec<f32>,
    pub point_id: Vec<Option<u32>>,
}

/// Maps normalised coordinates to continuous pixel coordinates: `col = (x+1)/2·S`.
pub fn to_pixel(v: f64, size: usize) -> f64 {
    (v + 1.0) * 0.5 * size as f64
}

/// Orthographic splat render of `view · points`: `x → column`, `y → row`, `z → depth`
/// with the smallest depth winning.
pub fn render(obj: &SyntheticObject, view: &Rotation, size: usize) -> Rendering {
    let n = size * size;
    let mut zbuf = vec![f64::INFINITY; n];
    let mut id = vec![None; n];
    let r_px = obj.splat_radius * 0.5 * size as f64;
    let r2 = r_px * r_px;
    for (k, p) in obj.points.iter().enumerate() {
        let q = view.apply(*p);
        let (cx, cy) = (to_pixel(q[0], size), to_pixel(q[1], size));
        let x0 = (cx - r_px - 0.5).floor().max(0.0) as usize;
        let y0 = (cy - r_px - 0.5).floor().max(0.0) as usize;
        let x1 = ((cx + r_px - 0.5).ceil().max(-1.0) as isize).min(size as isize - 1);
        let y1 = ((cy + r_px - 0.5).ceil().max(-1.0) as isize).min(size as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for row in y0..=y1 as usize {
            for col in x0..=x1 as usize {
                let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
                let pix = row * size + col;
                if dx * dx + dy * dy <= r2 && q[2] < zbuf[pix] {
                    zbuf[pix] = q[2];
                    id[pix] = Some(k as u32);
                }
            }
        }
    }
    let mut image = vec![0f32; 3 * n];
    let mut mask = vec![0f32; n];
    let mut depth = vec![f32::INFINITY; n];
    for pix in 0..n {
        if let Some(k) = id[pix] {
            let c = obj.colors[k as usize];
            for ch in 0..3 {
                image[ch * n + pix] = c[ch] as f32;
            }
            mask[pix] = 1.0;
            depth[pix] = zbuf[pix] as f32;
        }
    }
    Rendering { size, image, mask, depth, point_id: id }
}

/// One training/evaluation example. `delta_r = r_r · r_qᵀ` maps query-frame
/// coordinates to reference-frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: usize,
    pub size: usize,
    pub img_q: Vec<f32>,
    pub img_r: Vec<f32>,
    pub mask_q: Vec<f32>,
    pub mask_r: Vec<f32>,
    pub depth_q: Option<Vec<f32>>,
    pub depth_r: Option<Vec<f32>>,
    pub r_q: Rotation,
    pub r_r: Rotation,
    pub delta_r: Rotation,
    pub object_seed: u64,
}

impl SamplePair {
    /// The same pair seen from the other side.
    pub fn swapped(&self) -> Self {
        Self {
            img_q: self.img_r.clone(),
            img_r: self.img_q.clone(),
            mask_q: self.mask_r.clone(),
            mask_r: self.mask_q.clone(),
            depth_q: self.depth_r.clone(),
            depth_r: self.depth_q.clone(),
            r_q: self.r_r,
            r_r: self.r_q,
            delta_r: self.delta_r.transpose(),
            ..self.clone()
        }
    }
}

/// Draws views for `object_seed` and renders both.
pub fn make_pair(id: usize, object_seed: u64, angle_range_deg: Option<[f64; 2]>, size: usize) -> Result<SamplePair> {
    let obj = make_object(object_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(object_seed);
    rng.set_stream(1);
    let r_q = random_rotation(&mut rng);
    let (r_r, delta_r) = match angle_range_deg {
        Some([lo, hi]) => {
            let d = random_rotation_in_range(&mut rng, lo.to_radians(), hi.to_radians())?;
            (d.compose(&r_q), d)
        }
        None => {
            let r_r = random_rotation(&mut rng);
            (r_r, r_r.compose(&r_q.transpose()))
        }
    };
    let q = render(&obj, &r_q, size);
    let r = render(&obj, &r_r, size);
    Ok(SamplePair {
        id,
        size,
        img_q: q.image,
        img_r: r.image,
        mask_q: q.mask,
        mask_r: r.mask,
        depth_q: Some(q.depth),
        depth_r: Some(r.depth),
        r_q,
        r_r,
        delta_r,
        object_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Object seed of sample `index`; train and test occupy disjoint halves of the low 32 bits.
pub fn object_seed(generator_seed: u64, split: Split, index: usize) -> u64 {
    let base = generator_seed.wrapping_shl(32);
    match split {
        Split::Train => base | index as u64,
        Split::Test => base | (SPLIT_OFFSET + index as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Relative-rotation angle range in degrees; `None` is full SO(3).
    pub angle_range: Option<[f64; 2]>,
    pub size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_test: 200, seed: 0, angle_range: None, size: DEFAULT_IMAGE_SIZE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "S")]
    pub size: usize,
    pub counts: Counts,
    pub generator_seed: u64,
    pub angle_range: Option<[f64; 2]>,
    pub format_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobPaths {
    pub img_q: String,
    pub img_r: String,
    pub mask_q: String,
    pub mask_r: String,
    pub depth_q: String,
    pub depth_r: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub paths: BlobPaths,
    pub r_q: Vec<f64>,
    pub r_r: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub object_seed: u64,
}

fn write_blob(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(CoreError::Data(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), expected * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(io_err(path))
}

/// Generates both splits under `out_dir` (`meta.json`, `train/`, `test/`).
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetMeta> {
    if cfg.n_train as u64 > SPLIT_OFFSET || cfg.n_test as u64 > SPLIT_OFFSET {
        return Err(CoreError::Config("split sizes above 2^31 would overlap object-seed ranges".into()));
    }
    if cfg.size < 8 {
        return Err(CoreError::Config(format!("image size {} too small", cfg.size)));
    }
    if let Some([lo, hi]) = cfg.angle_range {
        if !(0.0 <= lo && lo <= hi && hi <= 180.0) {
            return Err(CoreError::Config(format!("angle range [{lo}, {hi}] outside [0, 180] degrees")));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (split, n) in [(Split::Train, cfg.n_train), (Split::Test, cfg.n_test)] {
        let dir = out_dir.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let records: Vec<ManifestRecord> = (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = object_seed(cfg.seed, split, i);
                let s = make_pair(i, seed, cfg.angle_range, cfg.size)?;
                let name = |k: &str| format!("{i:06}_{k}.f32");
                let paths = BlobPaths {
                    img_q: name("img_q"),
                    img_r: name("img_r"),
                    mask_q: name("mask_q"),
                    mask_r: name("mask_r"),
                    depth_q: name("depth_q"),
                    depth_r: name("depth_r"),
                };
                write_blob(&dir.join(&paths.img_q), &s.img_q)?;
                write_blob(&dir.join(&paths.img_r), &s.img_r)?;
                write_blob(&dir.join(&paths.mask_q), &s.mask_q)?;
                write_blob(&dir.join(&paths.mask_r), &s.mask_r)?;
                write_blob(&dir.join(&paths.depth_q), s.depth_q.as_deref().unwrap_or_default())?;
                write_blob(&dir.join(&paths.depth_r), s.depth_r.as_deref().unwrap_or_default())?;
                Ok(ManifestRecord {
                    id: i,
                    paths,
                    r_q: s.r_q.rows().to_vec(),
                    r_r: s.r_r.rows().to_vec(),
                    delta_r: s.delta_r.rows().to_vec(),
                    object_seed: seed,
                })
            })
            .collect::<Result<_>>()?;
        write_json(&dir.join("manifest.json"), &records)?;
    }
    let meta = DatasetMeta {
        size: cfg.size,
        counts: Counts { train: cfg.n_train, test: cfg.n_test },
        generator_seed: cfg.seed,
        angle_range: cfg.angle_range,
        format_version: FORMAT_VERSION,
    };
    write_json(&out_dir.join("meta.json"), &meta)?;
    Ok(meta)
}

/// One split of a generated dataset; samples are read from disk on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: Split,
    pub meta: DatasetMeta,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn open(root: &Path, split: Split) -> Result<Self> {
        let meta_path = root.join("meta.json");
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(CoreError::Data(format!("unsupported dataset format version {}", meta.format_version)));
        }
        let manifest = root.join(split.dir_name()).join("manifest.json");
        let records: Vec<ManifestRecord> = serde_json::from_slice(&fs::read(&manifest).map_err(io_err(&manifest))?)?;
        Ok(Self { root: root.to_path_buf(), split, meta, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn size(&self) -> usize {
        self.meta.size
    }

    /// Reads sample `index`; depth maps only when `with_depth`.
    pub fn get(&self, index: usize, with_depth: bool) -> Result<SamplePair> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| CoreError::Data(format!("sample {index} out of range ({} samples)", self.len())))?;
        let dir = self.root.join(self.split.dir_name());
        let n = self.meta.size * self.meta.size;
        let depth = |p: &str| -> Result<Option<Vec<f32>>> {
            if with_depth {
                Ok(Some(read_blob(&dir.join(p), n)?))
            } else {
                Ok(None)
            }
        };
        Ok(SamplePair {
            id: rec.id,
            size: self.meta.size,
            img_q: read_blob(&dir.join(&rec.paths.img_q), 3 * n)?,
            img_r: read_blob(&dir.join(&rec.paths.img_r), 3 * n)?,
            mask_q: read_blob(&dir.join(&rec.paths.mask_q), n)?,
            mask_r: read_blob(&dir.join(&rec.paths.mask_r), n)?,
            depth_q: depth(&rec.paths.depth_q)?,
            depth_r: depth(&rec.paths.depth_r)?,
            r_q: Rotation::from_rows(&rec.r_q)?,
            r_r: Rotation::from_rows(&rec.r_r)?,
            delta_r: Rotation::from_rows(&rec.delta_r)?,
            object_seed: rec.object_seed,
        })
    }
}
