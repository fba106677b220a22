//! Keypoint extraction, correspondence lifting, pose solve and training losses.

use engine::{Graph, Padding, Scalar, Tensor, Var};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{
    fourier_features, grid_positional_embedding, Activation, Attention, Bound, Encoder, Linear, Mlp, ParamStore,
    RopeCoords, RopeTables,
};
use crate::procrustes::{weighted_procrustes_var, SvdGradient};
use crate::so3::{sixd_to_rotation_var, Rotation};
use crate::synthdata::SamplePair;

/// Confidence is squeezed into `[CONF_FLOOR, 1 − CONF_FLOOR]`.
pub const CONF_FLOOR: f64 = 1e-4;

/// Variant switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub dense_kpt: bool,
    pub random_kpt: bool,
    pub no_self_attn: bool,
    pub no_cross_attn: bool,
    pub dense_reg: bool,
    pub global_reg: bool,
    pub no_mask_loss: bool,
    pub no_confidence: bool,
    pub detach_svd: bool,
    /// Rotate reference keys with the query keypoint coordinates, as written.
    pub rope_literal: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            dense_kpt: false,
            random_kpt: false,
            no_self_attn: false,
            no_cross_attn: false,
            dense_reg: false,
            global_reg: false,
            no_mask_loss: false,
            no_confidence: false,
            detach_svd: false,
            rope_literal: true,
        }
    }
}

impl Ablation {
    pub const NAMES: [&'static str; 10] = [
        "dense_kpt",
        "random_kpt",
        "no_self_attn",
        "no_cross_attn",
        "dense_reg",
        "global_reg",
        "no_mask_loss",
        "no_confidence",
        "detach_svd",
        "rope_corrected",
    ];

    /// Turns on the named variant (`full` leaves everything at defaults).
    pub fn enable(&mut self, name: &str) -> Result<()> {
        match name {
            "full" => {}
            "dense_kpt" => self.dense_kpt = true,
            "random_kpt" => self.random_kpt = true,
            "no_self_attn" => self.no_self_attn = true,
            "no_cross_attn" => self.no_cross_attn = true,
            "dense_reg" => self.dense_reg = true,
            "global_reg" => self.global_reg = true,
            "no_mask_loss" => self.no_mask_loss = true,
            "no_confidence" => self.no_confidence = true,
            "detach_svd" => self.detach_svd = true,
            "rope_corrected" => self.rope_literal = false,
            other => return Err(CoreError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(())
    }

    pub fn uses_correspondences(&self) -> bool {
        !(self.dense_reg || self.global_reg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_kpt: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub grid: usize,
    pub image_size: usize,
    /// Hidden encoder widths; the last convolution maps to `dim`.
    pub enc_channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub decoder_dim: usize,
    pub pe_freqs: usize,
    pub recon_sigma: f64,
    pub perceptual_seed: u64,
    pub alpha: f64,
    pub lambda_pts: f64,
    pub lambda_rec: f64,
    pub lambda_rot: f64,
    pub lambda_mask: f64,
    pub rec_pixel_weight: f64,
    pub rec_perceptual_weight: f64,
    #[serde(flatten)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_kpt: 48,
            dim: 64,
            layers: 2,
            heads: 4,
            grid: 16,
            image_size: 64,
            enc_channels: vec![16, 32],
            mlp_hidden: 128,
            decoder_dim: 32,
            pe_freqs: 8,
            recon_sigma: 0.15,
            perceptual_seed: 0x5eed,
            alpha: 0.05,
            lambda_pts: 1.0,
            lambda_rec: 1.0,
            lambda_rot: 1.0,
            lambda_mask: 0.5,
            rec_pixel_weight: 1.0,
            rec_perceptual_weight: 0.1,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// The smallest configuration exercising every component (used by gradient checks).
    pub fn tiny() -> Self {
        Self {
            n_kpt: 4,
            dim: 8,
            layers: 1,
            heads: 2,
            grid: 4,
            image_size: 16,
            enc_channels: vec![4, 4],
            mlp_hidden: 8,
            decoder_dim: 8,
            pe_freqs: 2,
            ..Self::default()
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Keypoints per image for the active keypoint source.
    pub fn keypoint_count(&self) -> usize {
        if self.ablation.dense_kpt {
            self.cells()
        } else {
            self.n_kpt
        }
    }

    pub fn strides(&self) -> Result<Vec<usize>> {
        let convs = self.enc_channels.len() + 1;
        if self.grid == 0 || !self.image_size.is_multiple_of(self.grid) || !(self.image_size / self.grid).is_power_of_two() {
            return Err(CoreError::Config(format!(
                "image size {} is not a power-of-two multiple of grid {}",
                self.image_size, self.grid
            )));
        }
        let halvings = (self.image_size / self.grid).trailing_zeros() as usize;
        if halvings > convs {
            return Err(CoreError::Config(format!("{convs} convolutions cannot downsample by {}", self.image_size / self.grid)));
        }
        Ok((0..convs).map(|i| if i < halvings { 2 } else { 1 }).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.ablation;
        if a.dense_kpt && a.random_kpt {
            return Err(CoreError::Config("dense_kpt and random_kpt are mutually exclusive".into()));
        }
        if a.dense_reg && a.global_reg {
            return Err(CoreError::Config("dense_reg and global_reg are mutually exclusive".into()));
        }
        if self.n_kpt < 2 {
            return Err(CoreError::Config("at least 2 keypoints are needed for a rank-2 covariance".into()));
        }
        if a.random_kpt && self.n_kpt > self.cells() {
            return Err(CoreError::Config("more random keypoints than grid cells".into()));
        }
        if self.layers == 0 && self.dim == 0 {
            return Err(CoreError::Config("empty model".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !(self.dim / self.heads).is_multiple_of(4) {
            return Err(CoreError::Config(format!(
                "width {} with {} heads needs a per-head width divisible by 4",
                self.dim, self.heads
            )));
        }
        if !(self.alpha >= 0.0 && self.recon_sigma > 0.0) {
            return Err(CoreError::Config("alpha must be ≥ 0 and recon_sigma > 0".into()));
        }
        self.strides().map(|_| ())
    }
}

/// Normalised centres of the `grid × grid` cells in row-major order, `(u, v)`.
pub fn cell_centers(grid: usize) -> Vec<[f64; 2]> {
    let c = |i: usize| 2.0 * (i as f64 + 0.5) / grid as f64 - 1.0;
    (0..grid * grid).map(|k| [c(k % grid), c(k / grid)]).collect()
}

/// Average-pools an `S × S` mask onto the `grid × grid` cells.
pub fn pool_mask(mask: &[f32], size: usize, grid: usize) -> Vec<f64> {
    let f = size / grid;
    let mut out = vec![0.0; grid * grid];
    for row in 0..size {
        for col in 0..size {
            out[(row / f) * grid + col / f] += mask[row * size + col] as f64;
        }
    }
    out.iter().map(|v| v / (f * f) as f64).collect()
}

fn tensor<T: Scalar>(shape: &[usize], data: &[f64]) -> Result<Tensor<T>> {
    Ok(Tensor::from_f64(shape, data)?)
}

fn to_f64(v: Var<'_, impl Scalar>) -> f64 {
    v.item().as_f64()
}

/// Keypoints of one image: coordinates `[N,2]` in `[−1,1]`, features `[N,C]`, heatmaps `[N, H·W]`.
pub struct Keypoints<'g, T: Scalar> {
    pub coords: Var<'g, T>,
    pub feats: Var<'g, T>,
    pub heatmaps: Var<'g, T>,
}

impl<'g, T: Scalar> Keypoints<'g, T> {
    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate values read through a stop-gradient node.
    fn coord_values(&self) -> Result<Vec<[f64; 2]>> {
        Ok(self.coords.detach()?.value().data().chunks(2).map(|c| [c[0].as_f64(), c[1].as_f64()]).collect())
    }
}

/// Where keypoints come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointSource<'a> {
    Learned,
    Dense,
    /// Uniform draw of cells from `candidates` (all cells when empty).
    Random { seed: u64, candidates: &'a [usize] },
}

/// Lifted correspondences: `x_q`, `x_r` are `[N,3]`, `confidence` is `[N]`.
pub struct Correspondences<'g, T: Scalar> {
    pub x_q: Var<'g, T>,
    pub x_r: Var<'g, T>,
    pub confidence: Var<'g, T>,
    pub depth: Var<'g, T>,
    pub feats: Var<'g, T>,
}

pub struct Features<'g, T: Scalar> {
    pub f_q: Var<'g, T>,
    pub f_r: Var<'g, T>,
    pub mask_logits_q: Var<'g, T>,
    pub mask_logits_r: Var<'g, T>,
    pub mask_q: Var<'g, T>,
    pub mask_r: Var<'g, T>,
    pub masked_q: Var<'g, T>,
    pub masked_r: Var<'g, T>,
}

/// Loss components as graph nodes.
pub struct Losses<'g, T: Scalar> {
    pub pts: Var<'g, T>,
    pub rec: Var<'g, T>,
    pub rot: Var<'g, T>,
    pub mask: Var<'g, T>,
    pub total: Var<'g, T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub pts: f64,
    pub rec: f64,
    pub rot: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossValues {
    pub fn add_scaled(&mut self, o: &LossValues, s: f64) {
        self.pts += s * o.pts;
        self.rec += s * o.rec;
        self.rot += s * o.rot;
        self.mask += s * o.mask;
        self.total += s * o.total;
    }
}

impl<'g, T: Scalar> Losses<'g, T> {
    pub fn values(&self) -> LossValues {
        LossValues {
            pts: to_f64(self.pts),
            rec: to_f64(self.rec),
            rot: to_f64(self.rot),
            mask: to_f64(self.mask),
            total: to_f64(self.total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Both directions, reconstructions and all losses.
    Train,
    /// Query→reference only, no losses.
    Infer { reconstruct: bool },
}

/// One branch's pose: the rotation node and, for correspondence variants, the lifted points.
pub struct Branch<'g, T: Scalar> {
    pub delta_r: Var<'g, T>,
    pub corr: Option<Correspondences<'g, T>>,
}

pub struct PairOutput<'g, T: Scalar> {
    pub features: Features<'g, T>,
    pub kp_q: Keypoints<'g, T>,
    pub kp_r: Keypoints<'g, T>,
    pub forward: Branch<'g, T>,
    pub backward: Option<Branch<'g, T>>,
    pub recon_q: Option<Var<'g, T>>,
    pub recon_r: Option<Var<'g, T>>,
    pub losses: Option<Losses<'g, T>>,
}

impl<'g, T: Scalar> PairOutput<'g, T> {
    /// Predicted query→reference rotation.
    pub fn rotation(&self) -> Result<Rotation> {
        let v = self.forward.delta_r.value();
        let rows: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
        let m = nalgebra::Matrix3::from_row_slice(&rows);
        // f32 graphs are re-orthonormalised so the SO(3) check is against f64 tolerance.
        let svd = crate::procrustes::svd3(&m);
        let d = (svd.u * svd.v.transpose()).determinant().signum();
        let fixed = svd.u * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * svd.v.transpose();
        Rotation::from_matrix(fixed)
    }
}

/// The pipeline's layer layout plus fixed (non-trainable) tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    encoder: Encoder,
    fi_self: Vec<Attention>,
    fi_cross: Vec<Attention>,
    mask_head: Linear,
    kpt_cross: Attention,
    dec_q: Linear,
    dec_k: Linear,
    dec_v: Linear,
    dec_mlp: Mlp,
    corr_self: Attention,
    corr_cross: Attention,
    depth_head: Mlp,
    ref_head: Mlp,
    global_head: Mlp,
    dense_head: Mlp,
    perceptual: Vec<(Tensor<f64>, usize)>,
    centers: Vec<[f64; 2]>,
    grid_pe: Tensor<f64>,
    pixel_pe: Tensor<f64>,
    pixel_coords: Tensor<f64>,
}

const PERCEPTUAL_LAYERS: [(usize, usize, usize); 3] = [(3, 8, 1), (8, 16, 2), (16, 32, 2)];

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let mut channels = vec![3];
        channels.extend(&config.enc_channels);
        channels.push(c);
        let encoder = Encoder::new("enc", config.image_size, &channels, &config.strides()?)?;
        let fi_self = (0..config.layers).map(|l| Attention::new(format!("fi.{l}.self"), c, config.heads)).collect::<Result<_>>()?;
        let fi_cross = (0..config.layers).map(|l| Attention::new(format!("fi.{l}.cross"), c, config.heads)).collect::<Result<_>>()?;
        let pe_width = 2 * 2 * config.pe_freqs;
        let pe3_width = 3 * 2 * config.pe_freqs;
        let dd = config.decoder_dim;
        let h = config.mlp_hidden;

        let mut rng = ChaCha8Rng::seed_from_u64(config.perceptual_seed);
        let perceptual = PERCEPTUAL_LAYERS
            .iter()
            .map(|&(cin, cout, stride)| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                (Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-bound..=bound)), stride)
            })
            .collect();

        let s = config.image_size;
        let pix: Vec<[f64; 2]> = cell_centers(s);
        let pixel_pe = fourier_features(&pix.iter().map(|p| p.to_vec()).collect::<Vec<_>>(), config.pe_freqs)?;
        let pixel_coords = Tensor::from_fn(&[s * s, 2], |i| pix[i / 2][i % 2]);
        let centers = cell_centers(config.grid);
        let grid_pe = grid_positional_embedding(&grid_units(&centers, config.grid), c)?;

        Ok(Self {
            encoder,
            fi_self,
            fi_cross,
            mask_head: Linear::new("mask", c, 1, true),
            kpt_cross: Attention::new("kpt.cross", c, config.heads)?,
            dec_q: Linear::new("dec.q", pe_width, dd, true),
            dec_k: Linear::new("dec.k", c, dd, false),
            dec_v: Linear::new("dec.v", c, dd, true),
            dec_mlp: Mlp::new("dec.mlp", &[dd, dd, 3], Activation::Relu)?,
            corr_self: Attention::new("corr.self", c, config.heads)?,
            corr_cross: Attention::new("corr.cross", c, config.heads)?,
            depth_head: Mlp::new("corr.depth", &[c, h, 1], Activation::Relu)?,
            ref_head: Mlp::new("corr.ref", &[c + pe3_width, h, h, 4], Activation::Relu)?,
            global_head: Mlp::new("reg.global", &[c, h, 6], Activation::Relu)?,
            dense_head: Mlp::new("reg.dense", &[c, h, 6], Activation::Relu)?,
            perceptual,
            centers,
            grid_pe,
            pixel_pe,
            pixel_coords,
            config,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Fresh parameters; the layout depends only on the configuration.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::<f64>::new();
        self.encoder.init(&mut s, &mut rng)?;
        for (a, b) in self.fi_self.iter().zip(&self.fi_cross) {
            a.init(&mut s, &mut rng)?;
            b.init(&mut s, &mut rng)?;
        }
        self.mask_head.init(&mut s, &mut rng)?;
        let (n, c) = (self.config.n_kpt, self.config.dim);
        let q = (3.0 * c as f64).sqrt();
        s.insert("kpt.queries", Tensor::from_fn(&[n, c], |_| rng.gen_range(-q..q)))?;
        self.kpt_cross.init(&mut s, &mut rng)?;
        self.dec_q.init(&mut s, &mut rng)?;
        self.dec_k.init(&mut s, &mut rng)?;
        self.dec_v.init(&mut s, &mut rng)?;
        self.dec_mlp.init(&mut s, &mut rng)?;
        self.corr_self.init(&mut s, &mut rng)?;
        self.corr_cross.init(&mut s, &mut rng)?;
        self.depth_head.init(&mut s, &mut rng)?;
        self.ref_head.init(&mut s, &mut rng)?;
        let a = &self.config.ablation;
        if a.global_reg {
            self.global_head.init(&mut s, &mut rng)?;
        }
        if a.dense_reg {
            self.dense_head.init(&mut s, &mut rng)?;
        }
        Ok(s.cast())
    }

    fn image_var<'g, T: Scalar>(&self, g: &'g Graph<T>, img: &[f32]) -> Result<Var<'g, T>> {
        let s = self.config.image_size;
        if img.len() != 3 * s * s {
            return Err(CoreError::Shape(format!("image has {} values, expected 3×{s}×{s}", img.len())));
        }
        Ok(g.constant(Tensor::new(vec![3, s, s], img.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?))
    }

    fn encode<'g, T: Scalar>(&self, p: &Bound<'g, T>, img: Var<'g, T>) -> Result<Var<'g, T>> {
        let tokens = self.encoder.forward(p, img)?;
        Ok(tokens.add(p.graph().constant(self.grid_pe.cast()))?)
    }

    /// Shared-parameter self/cross interaction, mask prediction and masking.
    pub fn extract_features<'g, T: Scalar>(&self, p: &Bound<'g, T>, img_q: Var<'g, T>, img_r: Var<'g, T>) -> Result<Features<'g, T>> {
        let mut f_q = self.encode(p, img_q)?;
        let mut f_r = self.encode(p, img_r)?;
        for (sa, ca) in self.fi_self.iter().zip(&self.fi_cross) {
            let s_q = sa.mhsa(p, f_q, None)?;
            let s_r = sa.mhsa(p, f_r, None)?;
            let next_q = ca.mhca(p, s_q, f_r, None)?;
            let next_r = ca.mhca(p, s_r, f_q, None)?;
            f_q = next_q;
            f_r = next_r;
        }
        let cells = self.config.cells();
        let c = self.config.dim;
        let mask = |f: Var<'g, T>| -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
            let logits = self.mask_head.forward(p, f)?.reshape(&[cells])?;
            let m = logits.sigmoid()?;
            let masked = f.mul(m.reshape(&[cells, 1])?.broadcast_to(&[cells, c])?)?;
            Ok((logits, m, masked))
        };
        let (mask_logits_q, mask_q, masked_q) = mask(f_q)?;
        let (mask_logits_r, mask_r, masked_r) = mask(f_r)?;
        Ok(Features { f_q, f_r, mask_logits_q, mask_logits_r, mask_q, mask_r, masked_q, masked_r })
    }

    /// Heatmap-weighted keypoints from learnable queries over masked features `[H·W, C]`.
    pub fn extract_keypoints<'g, T: Scalar>(&self, p: &Bound<'g, T>, masked: Var<'g, T>) -> Result<Keypoints<'g, T>> {
        let g = p.graph();
        let q = self.kpt_cross.mhca(p, p.get("kpt.queries")?, masked, None)?;
        let logits = q.matmul(masked.t()?)?.scale(1.0 / (self.config.dim as f64).sqrt())?;
        let heatmaps = logits.softmax()?;
        let centers = g.constant(self.centers_tensor());
        Ok(Keypoints { coords: heatmaps.matmul(centers)?, feats: heatmaps.matmul(masked)?, heatmaps })
    }

    fn centers_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.config.cells(), 2], |i| T::from_f64_lossy(self.centers[i / 2][i % 2]))
    }

    fn cells_as_keypoints<'g, T: Scalar>(&self, g: &'g Graph<T>, masked: Var<'g, T>, idx: &[usize]) -> Result<Keypoints<'g, T>> {
        let cells = self.config.cells();
        let n = idx.len();
        let mut coords = Vec::with_capacity(2 * n);
        let mut hm = vec![0.0; n * cells];
        for (i, &k) in idx.iter().enumerate() {
            coords.extend(self.centers[k]);
            hm[i * cells + k] = 1.0;
        }
        let feats = if n == cells && idx.iter().enumerate().all(|(i, &k)| i == k) { masked } else { masked.gather_rows(idx)? };
        Ok(Keypoints {
            coords: g.constant(tensor(&[n, 2], &coords)?),
            feats,
            heatmaps: g.constant(tensor(&[n, cells], &hm)?),
        })
    }

    pub fn keypoint_source<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        masked: Var<'g, T>,
        source: KeypointSource<'_>,
    ) -> Result<Keypoints<'g, T>> {
        let cells = self.config.cells();
        match source {
            KeypointSource::Learned => self.extract_keypoints(p, masked),
            KeypointSource::Dense => self.cells_as_keypoints(p.graph(), masked, &(0..cells).collect::<Vec<_>>()),
            KeypointSource::Random { seed, candidates } => {
                let all: Vec<usize>;
                let pool = if candidates.is_empty() {
                    all = (0..cells).collect();
                    &all
                } else {
                    candidates
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = self.config.n_kpt;
                let idx: Vec<usize> = if pool.len() >= n {
                    sample_indices(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
                } else {
                    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
                };
                self.cells_as_keypoints(p.graph(), masked, &idx)
            }
        }
    }

    /// Decoder attention of every pixel over keypoints, `[S², N]`, and the image `[3, S, S]`.
    pub fn reconstruct_with_attention<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        kp: &Keypoints<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let g = p.graph();
        let s = self.config.image_size;
        let q = self.dec_q.forward(p, g.constant(self.pixel_pe.cast()))?;
        let k = self.dec_k.forward(p, kp.feats)?;
        let v = self.dec_v.forward(p, kp.feats)?;
        let logits = q.matmul(k.t()?)?.scale(1.0 / (self.config.decoder_dim as f64).sqrt())?;
        // −‖p − x‖²/(2σ²) without the per-pixel ‖p‖² term, which the softmax ignores.
        let inv = 1.0 / (2.0 * self.config.recon_sigma * self.config.recon_sigma);
        let cross = g.constant(self.pixel_coords.cast()).matmul(kp.coords.t()?)?.scale(2.0 * inv)?;
        let sq = kp.coords.square()?.sum_axis(1)?.scale(-inv)?;
        let w = logits.add(cross)?.add(sq)?.softmax()?;
        let h = w.matmul(v)?;
        let rgb = self.dec_mlp.forward(p, h)?.sigmoid()?;
        Ok((w, rgb.t()?.reshape(&[3, s, s])?))
    }

    pub fn reconstruct<'g, T: Scalar>(&self, p: &Bound<'g, T>, kp: &Keypoints<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.reconstruct_with_attention(p, kp)?.1)
    }

    fn grid_coords(&self, kp: &Keypoints<'_, impl Scalar>) -> Result<Vec<[f64; 2]>> {
        Ok(grid_units(&kp.coord_values()?, self.config.grid))
    }

    /// Structure-aware features of `kp_q` attending to `kp_r`, lifted to 3D pairs.
    pub fn estimate_correspondences<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        kp_q: &Keypoints<'g, T>,
        kp_r: &Keypoints<'g, T>,
    ) -> Result<Correspondences<'g, T>> {
        let feats = self.correspondence_features(p, kp_q, kp_r)?;
        self.lift(p, kp_q, feats)
    }

    fn correspondence_features<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        kp_q: &Keypoints<'g, T>,
        kp_r: &Keypoints<'g, T>,
    ) -> Result<Var<'g, T>> {
        let a = &self.config.ablation;
        let xq = self.grid_coords(kp_q)?;
        let xr = self.grid_coords(kp_r)?;
        let tilde = if a.no_self_attn {
            RopeTables::new(&xq, self.config.dim)?.apply(kp_q.feats)?
        } else {
            self.corr_self.mhsa(p, kp_q.feats, Some(&xq))?
        };
        if a.no_cross_attn {
            return Ok(tilde);
        }
        let key = if a.rope_literal { &xq } else { &xr };
        if key.len() != kp_r.len() {
            return Err(CoreError::Shape("literal rotary keys need equal keypoint counts".into()));
        }
        self.corr_cross.mhca(p, tilde, kp_r.feats, Some(RopeCoords { query: &xq, key }))
    }

    fn lift<'g, T: Scalar>(&self, p: &Bound<'g, T>, kp_q: &Keypoints<'g, T>, feats: Var<'g, T>) -> Result<Correspondences<'g, T>> {
        let g = p.graph();
        let n = kp_q.len();
        let depth = self.depth_head.forward(p, feats)?.tanh()?;
        let x_q = g.concat(&[kp_q.coords, depth], 1)?;
        let rows: Vec<Vec<f64>> = x_q.detach()?.value().data().chunks(3).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        let pe = g.constant(fourier_features::<T>(&rows, self.config.pe_freqs)?);
        let out = self.ref_head.forward(p, g.concat(&[feats, pe], 1)?)?;
        let x_r = out.slice(1, 0, 3)?;
        let confidence = out.slice(1, 3, 4)?.reshape(&[n])?.sigmoid()?.scale(1.0 - 2.0 * CONF_FLOOR)?.add_scalar(CONF_FLOOR)?;
        Ok(Correspondences { x_q, x_r, confidence, depth: depth.reshape(&[n])?, feats })
    }

    /// Weighted Procrustes on the lifted pairs.
    pub fn solve_pose<'g, T: Scalar>(&self, cs: &Correspondences<'g, T>) -> Result<Var<'g, T>> {
        let a = &self.config.ablation;
        let c = if a.no_confidence { cs.confidence.graph().constant(Tensor::ones(&cs.confidence.shape())) } else { cs.confidence };
        let mode = if a.detach_svd { SvdGradient::Detached } else { SvdGradient::Backprop };
        weighted_procrustes_var(cs.x_q, cs.x_r, c, mode)
    }

    /// One direction of the pose head for the configured variant.
    pub fn pose_branch<'g, T: Scalar>(&self, p: &Bound<'g, T>, kp_q: &Keypoints<'g, T>, kp_r: &Keypoints<'g, T>) -> Result<Branch<'g, T>> {
        let a = &self.config.ablation;
        if a.uses_correspondences() {
            let corr = self.estimate_correspondences(p, kp_q, kp_r)?;
            return Ok(Branch { delta_r: self.solve_pose(&corr)?, corr: Some(corr) });
        }
        let feats = self.correspondence_features(p, kp_q, kp_r)?;
        let sixd = if a.global_reg {
            self.global_head.forward(p, feats.mean_axis(0)?.reshape(&[1, self.config.dim])?)?
        } else {
            self.dense_head.forward(p, feats)?.mean_axis(0)?
        };
        Ok(Branch { delta_r: sixd_to_rotation_var(sixd)?, corr: None })
    }

    fn source_for<'a>(&self, train: bool, seed: u64, fg_cells: &'a [usize]) -> KeypointSource<'a> {
        let a = &self.config.ablation;
        if a.dense_kpt {
            KeypointSource::Dense
        } else if a.random_kpt {
            KeypointSource::Random { seed, candidates: if train { fg_cells } else { &[] } }
        } else {
            KeypointSource::Learned
        }
    }

    /// Full forward pass for a pair. `kp_seed` drives random keypoint sampling.
    pub fn forward_pair<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        sample: &SamplePair,
        mode: Mode,
        kp_seed: u64,
    ) -> Result<PairOutput<'g, T>> {
        let g = p.graph();
        let s = self.config.image_size;
        if sample.size != s {
            return Err(CoreError::Shape(format!("sample is {}×{0}, model expects {s}×{s}", sample.size)));
        }
        let img_q = self.image_var(g, &sample.img_q)?;
        let img_r = self.image_var(g, &sample.img_r)?;
        let features = self.extract_features(p, img_q, img_r)?;
        let train = mode == Mode::Train;
        let grid_q = pool_mask(&sample.mask_q, s, self.config.grid);
        let grid_r = pool_mask(&sample.mask_r, s, self.config.grid);
        let fg = |m: &[f64]| m.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect::<Vec<_>>();
        let (fg_q, fg_r) = (fg(&grid_q), fg(&grid_r));
        let kp_q = self.keypoint_source(p, features.masked_q, self.source_for(train, kp_seed, &fg_q))?;
        let kp_r = self.keypoint_source(p, features.masked_r, self.source_for(train, kp_seed ^ 0x9e37_79b9_7f4a_7c15, &fg_r))?;
        let forward = self.pose_branch(p, &kp_q, &kp_r)?;

        let (recon_q, recon_r) = match mode {
            Mode::Train | Mode::Infer { reconstruct: true } => (Some(self.reconstruct(p, &kp_q)?), Some(self.reconstruct(p, &kp_r)?)),
            Mode::Infer { reconstruct: false } => (None, None),
        };
        if !train {
            return Ok(PairOutput { features, kp_q, kp_r, forward, backward: None, recon_q, recon_r, losses: None });
        }

        let backward = self.pose_branch(p, &kp_r, &kp_q)?;
        let (rq, rr) = (recon_q.expect("train mode reconstructs"), recon_r.expect("train mode reconstructs"));
        let gt = GroundTruth { sample, grid_q: &grid_q, grid_r: &grid_r };
        let losses = self.compute_losses(g, &features, &forward, &backward, rq, rr, &gt)?;
        Ok(PairOutput { features, kp_q, kp_r, forward, backward: Some(backward), recon_q: Some(rq), recon_r: Some(rr), losses: Some(losses) })
    }

    #[allow(clippy::too_many_arguments)]
    fn compute_losses<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        features: &Features<'g, T>,
        fwd: &Branch<'g, T>,
        bwd: &Branch<'g, T>,
        recon_q: Var<'g, T>,
        recon_r: Var<'g, T>,
        gt: &GroundTruth<'_>,
    ) -> Result<Losses<'g, T>> {
        let cfg = &self.config;
        let delta = gt.sample.delta_r;
        let delta_t = delta.transpose();

        let zero = g.scalar(0.0);
        let (pts, rot) = {
            let pts_f = match &fwd.corr {
                Some(c) => pts_loss(c, &delta, cfg.alpha, !cfg.ablation.no_confidence, PtsTerms::BOTH)?,
                None => zero,
            };
            let pts_b = match &bwd.corr {
                Some(c) => pts_loss(c, &delta_t, cfg.alpha, !cfg.ablation.no_confidence, PtsTerms::BOTH)?,
                None => zero,
            };
            let rot_f = rot_loss(fwd.delta_r, &delta)?;
            let rot_b = rot_loss(bwd.delta_r, &delta_t)?;
            (pts_f.add(pts_b)?.scale(0.5)?, rot_f.add(rot_b)?.scale(0.5)?)
        };

        let s = cfg.image_size;
        let rec_q = self.rec_loss(g, recon_q, &gt.sample.img_q, &gt.sample.mask_q, s)?;
        let rec_r = self.rec_loss(g, recon_r, &gt.sample.img_r, &gt.sample.mask_r, s)?;
        let rec = rec_q.add(rec_r)?;

        let mask = if cfg.ablation.no_mask_loss {
            zero
        } else {
            bce_with_logits(features.mask_logits_q, gt.grid_q)?.add(bce_with_logits(features.mask_logits_r, gt.grid_r)?)?
        };

        let total = pts
            .scale(cfg.lambda_pts)?
            .add(rec.scale(cfg.lambda_rec)?)?
            .add(rot.scale(cfg.lambda_rot)?)?
            .add(mask.scale(cfg.lambda_mask)?)?;
        let losses = Losses { pts, rec, rot, mask, total };
        let v = losses.values();
        for (component, value) in [("pts", v.pts), ("rec", v.rec), ("rot", v.rot), ("mask", v.mask), ("total", v.total)] {
            if !value.is_finite() {
                return Err(CoreError::NonFiniteLoss { component, value });
            }
        }
        Ok(losses)
    }

    /// Foreground pixel L2 plus random-feature perceptual distance.
    fn rec_loss<'g, T: Scalar>(&self, g: &'g Graph<T>, pred: Var<'g, T>, target: &[f32], mask: &[f32], s: usize) -> Result<Var<'g, T>> {
        let n = s * s;
        let fg: f64 = mask.iter().map(|&m| m as f64).sum::<f64>().max(1.0);
        let m3 = Tensor::<T>::from_fn(&[3, s, s], |i| T::from_f64_lossy(mask[i % n] as f64));
        let m3 = g.constant(m3);
        let tgt = g.constant(Tensor::<T>::from_fn(&[3, s, s], |i| T::from_f64_lossy((target[i] * mask[i % n]) as f64)));
        let pred_m = pred.mul(m3)?;
        let pix = pred_m.sub(tgt)?.square()?.sum()?.scale(1.0 / (3.0 * fg))?;

        let mut perc = g.scalar(0.0);
        let (mut a, mut b) = (pred_m, tgt);
        for (w, stride) in &self.perceptual {
            let w = g.constant(w.cast());
            a = a.conv2d(w, *stride, Padding::Same)?.relu()?;
            b = b.conv2d(w, *stride, Padding::Same)?.relu()?.detach()?;
            perc = perc.add(a.sub(b)?.square()?.mean()?)?;
        }
        Ok(pix.scale(self.config.rec_pixel_weight)?.add(perc.scale(self.config.rec_perceptual_weight)?)?)
    }

    /// Analytic multiply-accumulate count of one inference forward (query branch).
    pub fn inference_macs(&self) -> u64 {
        let cfg = &self.config;
        let (t, c) = (cfg.cells(), cfg.dim);
        let n = cfg.keypoint_count();
        let mut total = 2 * self.encoder.macs();
        for (sa, ca) in self.fi_self.iter().zip(&self.fi_cross) {
            total += 2 * (sa.macs(t, t) + ca.macs(t, t));
        }
        total += 2 * self.mask_head.macs(t) + 2 * (t * c) as u64;
        if !(cfg.ablation.dense_kpt || cfg.ablation.random_kpt) {
            let nq = cfg.n_kpt;
            total += 2 * (self.kpt_cross.macs(nq, t) + (nq * t * c) as u64 + (nq * t * (c + 2)) as u64);
        }
        let d = c / cfg.heads;
        let rope = |tok: usize| (tok * d * d * cfg.heads) as u64;
        if !cfg.ablation.no_self_attn {
            total += self.corr_self.macs(n, n) + 2 * rope(n);
        } else {
            total += (n * c * c) as u64;
        }
        if !cfg.ablation.no_cross_attn {
            total += self.corr_cross.macs(n, n) + 2 * rope(n);
        }
        if cfg.ablation.global_reg {
            total += self.global_head.macs(1);
        } else if cfg.ablation.dense_reg {
            total += self.dense_head.macs(n);
        } else {
            total += self.depth_head.macs(n) + self.ref_head.macs(n) + (3 * 3 * n) as u64;
        }
        total
    }
}

struct GroundTruth<'a> {
    sample: &'a SamplePair,
    grid_q: &'a [f64],
    grid_r: &'a [f64],
}

/// Normalised `[−1,1]` coordinates to grid-cell units for rotary angles.
fn grid_units(coords: &[[f64; 2]], grid: usize) -> Vec<[f64; 2]> {
    let half = grid as f64 / 2.0;
    coords.iter().map(|c| [c[0] * half, c[1] * half]).collect()
}

/// Which halves of the symmetric stop-gradient point error are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PtsTerms {
    /// `‖x^R − sg(x_gt)‖²`: trains the reference-coordinate head.
    pub toward_target: bool,
    /// `‖sg(x^R) − x_gt‖²`: trains the lifted query points.
    pub toward_prediction: bool,
}

impl PtsTerms {
    pub const BOTH: Self = Self { toward_target: true, toward_prediction: true };
}

/// `mean(c·e − α log c)` with `e = ½(‖x^R − sg(ΔR x^Q)‖² + ‖sg(x^R) − ΔR x^Q‖²)`.
pub fn pts_loss<'g, T: Scalar>(
    cs: &Correspondences<'g, T>,
    delta_gt: &Rotation,
    alpha: f64,
    use_confidence: bool,
    terms: PtsTerms,
) -> Result<Var<'g, T>> {
    let g = cs.x_q.graph();
    let rt = g.constant(tensor(&[3, 3], &delta_gt.transpose().rows())?);
    let x_gt = cs.x_q.matmul(rt)?;
    let mut e = g.scalar(0.0);
    if terms.toward_target {
        e = e.add(cs.x_r.sub(x_gt.detach()?)?.square()?.sum_axis(1)?)?;
    }
    if terms.toward_prediction {
        e = e.add(cs.x_r.detach()?.sub(x_gt)?.square()?.sum_axis(1)?)?;
    }
    let e = e.scale(0.5)?;
    if use_confidence {
        Ok(cs.confidence.mul(e)?.sub(cs.confidence.log()?.scale(alpha)?)?.mean()?)
    } else {
        Ok(e.mean()?)
    }
}

/// `‖q(ΔR) − q(ΔR_gt)‖₁` over the first two columns.
pub fn rot_loss<'g, T: Scalar>(delta_r: Var<'g, T>, delta_gt: &Rotation) -> Result<Var<'g, T>> {
    let g = delta_r.graph();
    let m = delta_gt.matrix();
    let gt: Vec<f64> = (0..3).flat_map(|i| [m[(i, 0)], m[(i, 1)]]).collect();
    Ok(delta_r.slice(1, 0, 2)?.sub(g.constant(tensor(&[3, 2], &gt)?))?.abs()?.sum()?)
}

/// Mean binary cross-entropy of sigmoid(`logits`) against soft `targets`.
pub fn bce_with_logits<'g, T: Scalar>(logits: Var<'g, T>, targets: &[f64]) -> Result<Var<'g, T>> {
    let g = logits.graph();
    let y = g.constant(tensor(&logits.shape(), targets)?);
    let softplus = logits.relu()?.add(logits.abs()?.neg()?.exp()?.add_scalar(1.0)?.log()?)?;
    Ok(softplus.sub(y.mul(logits)?)?.mean()?)
}
