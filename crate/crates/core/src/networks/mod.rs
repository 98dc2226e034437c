//! The five networks: content encoder `E_C`, pose encoder `E_P`, domain
//! generators `G_S`/`G_T`, domain discriminators `D_S`/`D_T` and the pose
//! discriminator `D_P`.

pub mod forward;

use std::collections::BTreeMap;

use autograd::nn::{add_affine, add_conv, add_linear, uniform_init};
use autograd::{Graph, ParamGroup, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, PersonImage, PoseMap, NUM_KEYPOINTS};
use crate::error::{ensure, Error, Result};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// How the generator combines the pose and content vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Concatenate `(v_p, v_c)` and project linearly to the base grid.
    Concat,
    /// Project `v_c` to the base grid and append `v_p` tiled over it.
    Broadcast,
}

/// Architecture hyperparameters shared by all networks of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    /// Content feature dimension `d`.
    pub content_dim: usize,
    /// Pose feature dimension `h`.
    pub pose_dim: usize,
    /// Output channels of each strided residual block of `E_C`.
    pub content_widths: Vec<usize>,
    /// Output channels of each strided conv block of `E_P`.
    pub pose_widths: Vec<usize>,
    /// Channels per generator stage, lowest resolution first. Each stage
    /// after the first doubles the resolution.
    pub generator_widths: Vec<usize>,
    /// Number of leading generator stages that get a residual block.
    pub generator_res_blocks: usize,
    pub domain_disc_widths: Vec<usize>,
    /// Channels of the `D_P` conv blocks before its one-channel head.
    pub pose_disc_widths: Vec<usize>,
    /// How many leading `D_P` blocks use stride 2.
    pub pose_disc_downsample: usize,
    pub fusion: Fusion,
    /// Spectral normalisation of discriminator weights.
    pub spectral_norm: bool,
    /// Project content features onto the unit sphere.
    pub normalize_content: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            content_dim: 128,
            pose_dim: 32,
            content_widths: vec![8, 16, 32, 64],
            pose_widths: vec![8, 16, 32, 32],
            generator_widths: vec![32, 16, 8, 8],
            generator_res_blocks: 1,
            domain_disc_widths: vec![8, 16, 32, 32],
            pose_disc_widths: vec![8, 16, 32],
            pose_disc_downsample: 3,
            fusion: Fusion::Concat,
            spectral_norm: false,
            normalize_content: true,
        }
    }
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

impl NetConfig {
    /// A very small configuration for numerical gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 16,
            width: 8,
            content_dim: 8,
            pose_dim: 4,
            content_widths: vec![3, 4, 4, 4],
            pose_widths: vec![2, 3, 3, 3],
            generator_widths: vec![4, 3, 2],
            generator_res_blocks: 1,
            domain_disc_widths: vec![2, 3],
            pose_disc_widths: vec![3, 3, 3, 3],
            pose_disc_downsample: 2,
            fusion: Fusion::Concat,
            spectral_norm: false,
            normalize_content: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.height > 0 && self.width > 0, "image size must be non-empty");
        ensure!(self.content_dim > 0 && self.pose_dim > 0, "feature dimensions must be positive");
        for (name, w) in [
            ("content_widths", &self.content_widths),
            ("pose_widths", &self.pose_widths),
            ("generator_widths", &self.generator_widths),
            ("domain_disc_widths", &self.domain_disc_widths),
            ("pose_disc_widths", &self.pose_disc_widths),
        ] {
            ensure!(!w.is_empty() && w.iter().all(|&c| c > 0), "{name} must be a non-empty list of positive widths");
        }
        let up = 1usize << (self.generator_widths.len() - 1);
        ensure!(
            self.height.is_multiple_of(up) && self.width.is_multiple_of(up),
            "image size {}x{} must be divisible by {up} for {} generator stages",
            self.height,
            self.width,
            self.generator_widths.len()
        );
        ensure!(
            self.generator_res_blocks <= self.generator_widths.len(),
            "generator_res_blocks exceeds the number of generator stages"
        );
        ensure!(
            self.pose_disc_downsample <= self.pose_disc_widths.len(),
            "pose_disc_downsample exceeds the number of pose discriminator blocks"
        );
        Ok(())
    }

    /// Spatial size of the generator's first stage.
    pub fn generator_base(&self) -> (usize, usize) {
        let up = 1usize << (self.generator_widths.len() - 1);
        (self.height / up, self.width / up)
    }

    fn pose_feature_grid(&self) -> (usize, usize) {
        let mut hw = (self.height, self.width);
        for _ in &self.pose_widths {
            hw = (halve(hw.0), halve(hw.1));
        }
        hw
    }

    /// Spatial size of the `D_P` confidence map.
    pub fn confidence_map_size(&self) -> (usize, usize) {
        let mut hw = (self.height, self.width);
        for _ in 0..self.pose_disc_downsample {
            hw = (halve(hw.0), halve(hw.1));
        }
        hw
    }
}

/// Identifies one named parameter collection of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    ContentEncoder,
    PoseEncoder,
    SourceGenerator,
    TargetGenerator,
    SourceDiscriminator,
    TargetDiscriminator,
    /// The shared `D_P`, or the source-side one when not shared.
    PoseDiscriminator,
    /// Target-side `D_P`; exists only when `D_P` is not shared.
    TargetPoseDiscriminator,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::ContentEncoder,
        Group::PoseEncoder,
        Group::SourceGenerator,
        Group::TargetGenerator,
        Group::SourceDiscriminator,
        Group::TargetDiscriminator,
        Group::PoseDiscriminator,
        Group::TargetPoseDiscriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ContentEncoder => "ec",
            Group::PoseEncoder => "ep",
            Group::SourceGenerator => "gs",
            Group::TargetGenerator => "gt",
            Group::SourceDiscriminator => "ds",
            Group::TargetDiscriminator => "dt",
            Group::PoseDiscriminator => "dp",
            Group::TargetPoseDiscriminator => "dp_t",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn generator(domain: Domain) -> Group {
        match domain {
            Domain::Source => Group::SourceGenerator,
            Domain::Target => Group::TargetGenerator,
        }
    }

    pub fn discriminator(domain: Domain) -> Group {
        match domain {
            Domain::Source => Group::SourceDiscriminator,
            Domain::Target => Group::TargetDiscriminator,
        }
    }
}

/// Parameters of every network, keyed by [`Group`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    groups: BTreeMap<Group, ParamGroup<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialisation. With `share_dp` both domains use one `D_P`,
    /// otherwise each domain gets its own.
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, share_dp: bool, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut groups = BTreeMap::new();
        groups.insert(Group::ContentEncoder, init_content(cfg, rng));
        groups.insert(Group::PoseEncoder, init_pose(cfg, rng));
        groups.insert(Group::SourceGenerator, init_generator(cfg, rng));
        groups.insert(Group::TargetGenerator, init_generator(cfg, rng));
        groups.insert(Group::SourceDiscriminator, init_domain_disc(cfg, rng));
        groups.insert(Group::TargetDiscriminator, init_domain_disc(cfg, rng));
        groups.insert(Group::PoseDiscriminator, init_pose_disc(cfg, rng));
        if !share_dp {
            groups.insert(Group::TargetPoseDiscriminator, init_pose_disc(cfg, rng));
        }
        Ok(Self { groups })
    }

    /// Builds from explicit groups, checking the required set is present.
    pub fn from_groups(groups: BTreeMap<Group, ParamGroup<T>>) -> Result<Self> {
        for g in &Group::ALL[..7] {
            ensure!(groups.contains_key(g), "missing parameter group {}", g.name());
        }
        Ok(Self { groups })
    }

    pub fn get(&self, g: Group) -> &ParamGroup<T> {
        self.groups.get(&g).unwrap_or_else(|| panic!("no parameter group {}", g.name()))
    }

    pub fn get_mut(&mut self, g: Group) -> &mut ParamGroup<T> {
        self.groups.get_mut(&g).unwrap_or_else(|| panic!("no parameter group {}", g.name()))
    }

    pub fn groups(&self) -> impl Iterator<Item = (Group, &ParamGroup<T>)> {
        self.groups.iter().map(|(g, p)| (*g, p))
    }

    pub fn has(&self, g: Group) -> bool {
        self.groups.contains_key(&g)
    }

    pub fn shares_pose_disc(&self) -> bool {
        !self.groups.contains_key(&Group::TargetPoseDiscriminator)
    }

    /// The `D_P` group consumed by `domain`'s pose loss.
    pub fn pose_disc_group(&self, domain: Domain) -> Group {
        match domain {
            Domain::Target if !self.shares_pose_disc() => Group::TargetPoseDiscriminator,
            _ => Group::PoseDiscriminator,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.groups.values().map(ParamGroup::num_elements).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups.values().all(ParamGroup::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let groups = self
            .groups
            .iter()
            .map(|(g, p)| (*g, p.iter().map(|(k, t)| (k.to_string(), t.cast::<U>())).collect()))
            .collect();
        ModelParams { groups }
    }
}

fn init_content<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamGroup<T> {
    let mut p = ParamGroup::new();
    let mut c_in = 3;
    for (i, &c) in cfg.content_widths.iter().enumerate() {
        add_conv(&mut p, rng, &format!("block{i}.down"), (c_in, c, 3), RELU_GAIN);
        // Residual branches start small so each block begins near identity.
        add_conv(&mut p, rng, &format!("block{i}.res"), (c, c, 3), 0.5);
        c_in = c;
    }
    add_linear(&mut p, rng, "head", (c_in, cfg.content_dim), 1.0);
    p
}

fn init_pose<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamGroup<T> {
    let mut p = ParamGroup::new();
    let mut c_in = NUM_KEYPOINTS;
    for (i, &c) in cfg.pose_widths.iter().enumerate() {
        add_conv(&mut p, rng, &format!("block{i}"), (c_in, c, 3), RELU_GAIN);
        c_in = c;
    }
    let (h, w) = cfg.pose_feature_grid();
    add_linear(&mut p, rng, "head", (c_in * h * w, cfg.pose_dim), 1.0);
    p
}

fn init_generator<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamGroup<T> {
    let mut p = ParamGroup::new();
    let (h0, w0) = cfg.generator_base();
    let c0 = cfg.generator_widths[0];
    match cfg.fusion {
        Fusion::Concat => add_linear(&mut p, rng, "fuse", (cfg.pose_dim + cfg.content_dim, c0 * h0 * w0), 1.0),
        Fusion::Broadcast => {
            add_linear(&mut p, rng, "fuse", (cfg.content_dim, c0 * h0 * w0), 1.0);
            add_conv(&mut p, rng, "fuse_conv", (c0 + cfg.pose_dim, c0, 3), 1.0);
        }
    }
    let stages = cfg.generator_widths.len();
    for i in 0..stages {
        let c = cfg.generator_widths[i];
        if i < cfg.generator_res_blocks {
            add_affine(&mut p, &format!("res{i}.n0"), c);
            add_conv(&mut p, rng, &format!("res{i}.c0"), (c, c, 3), RELU_GAIN);
            add_affine(&mut p, &format!("res{i}.n1"), c);
            add_conv(&mut p, rng, &format!("res{i}.c1"), (c, c, 3), 0.5);
        }
        if i + 1 < stages {
            add_affine(&mut p, &format!("up{i}.n"), c);
            add_conv(&mut p, rng, &format!("up{i}.c"), (c, cfg.generator_widths[i + 1], 3), RELU_GAIN);
        }
    }
    let last = *cfg.generator_widths.last().expect("validated non-empty");
    add_affine(&mut p, "out.n", last);
    add_conv(&mut p, rng, "out.c", (last, 3, 3), 1.0);
    p
}

fn init_domain_disc<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamGroup<T> {
    let mut p = ParamGroup::new();
    let mut c_in = 3;
    for (i, &c) in cfg.domain_disc_widths.iter().enumerate() {
        add_conv(&mut p, rng, &format!("block{i}"), (c_in, c, 3), RELU_GAIN);
        c_in = c;
    }
    add_linear(&mut p, rng, "head", (c_in, 1), 1.0);
    p
}

/// The first `D_P` convolution acts on the image and pose channels; its
/// kernel is stored as `block0.img.w` and `block0.pose.w`, initialised as one
/// kernel over all `3 + 18` channels.
fn init_pose_disc<T: Scalar, R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> ParamGroup<T> {
    let mut p = ParamGroup::new();
    let c0 = cfg.pose_disc_widths[0];
    let fan_in = (3 + NUM_KEYPOINTS) * 9;
    p.insert("block0.img.w", uniform_init(rng, &[c0, 3, 3, 3], fan_in, RELU_GAIN));
    p.insert("block0.pose.w", uniform_init(rng, &[c0, NUM_KEYPOINTS, 3, 3], fan_in, RELU_GAIN));
    p.insert("block0.b", Tensor::zeros(vec![c0]));
    let mut c_in = c0;
    for (i, &c) in cfg.pose_disc_widths.iter().enumerate().skip(1) {
        add_conv(&mut p, rng, &format!("block{i}"), (c_in, c, 3), RELU_GAIN);
        c_in = c;
    }
    add_conv(&mut p, rng, "head", (c_in, 1, 3), 1.0);
    p
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn image_batch<T: Scalar>(images: &[&PersonImage], height: usize, width: usize) -> Result<Tensor<T>> {
    ensure!(!images.is_empty(), "empty image batch");
    let mut data = Vec::with_capacity(images.len() * 3 * height * width);
    for (i, im) in images.iter().enumerate() {
        ensure!(
            im.height() == height && im.width() == width,
            "image {i} is {}x{}, model expects {height}x{width}",
            im.height(),
            im.width()
        );
        data.extend(im.data().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(vec![images.len(), 3, height, width], data).expect("shape"))
}

/// Stacks pose maps into an `[N, 18, H, W]` tensor.
pub fn pose_batch<T: Scalar>(maps: &[&PoseMap], height: usize, width: usize) -> Result<Tensor<T>> {
    ensure!(!maps.is_empty(), "empty pose batch");
    let mut data = Vec::with_capacity(maps.len() * NUM_KEYPOINTS * height * width);
    for (i, m) in maps.iter().enumerate() {
        ensure!(
            m.height() == height && m.width() == width,
            "pose map {i} is {}x{}, model expects {height}x{width}",
            m.height(),
            m.width()
        );
        data.extend(m.data().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(vec![maps.len(), NUM_KEYPOINTS, height, width], data).expect("shape"))
}

/// Converts an `[N, 3, H, W]` tensor in `[-1, 1]` back into images.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<PersonImage>> {
    let s = t.shape();
    ensure!(s.len() == 4 && s[1] == 3, "expected [N, 3, H, W], got {s:?}");
    let per = 3 * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|c| PersonImage::new(s[2], s[3], c.iter().map(|v| v.as_f64().clamp(-1.0, 1.0) as f32).collect()))
        .collect()
}

/// Inference batch size; bounds the memory of one forward graph.
const CHUNK: usize = 64;

/// A configured model with `f32` parameters and the inference operations.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ModelParams<f32>,
}

impl Model {
    pub fn new(config: NetConfig, params: ModelParams<f32>) -> Self {
        Self { config, params }
    }

    pub fn init<R: Rng + ?Sized>(config: NetConfig, share_dp: bool, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, share_dp, rng)?;
        Ok(Self { config, params })
    }

    fn dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    /// Content features `[N, d]`.
    pub fn encode_content(&self, images: &[&PersonImage]) -> Result<Tensor<f32>> {
        let (h, w) = self.dims();
        let mut parts = Vec::new();
        for chunk in images.chunks(CHUNK) {
            let x = image_batch::<f32>(chunk, h, w)?;
            let mut g = Graph::new();
            let p = self.params.get(Group::ContentEncoder).bind(&mut g, false);
            let x = g.constant(x);
            let v = forward::content_encoder(&mut g, &p, &self.config, x);
            parts.push(g.value(v).clone());
        }
        ensure!(!parts.is_empty(), "empty image batch");
        Ok(Tensor::cat_rows(&parts.iter().collect::<Vec<_>>()))
    }

    /// Pose features `[N, h]`.
    pub fn encode_pose(&self, maps: &[&PoseMap]) -> Result<Tensor<f32>> {
        let (h, w) = self.dims();
        let mut parts = Vec::new();
        for chunk in maps.chunks(CHUNK) {
            let x = pose_batch::<f32>(chunk, h, w)?;
            let mut g = Graph::new();
            let p = self.params.get(Group::PoseEncoder).bind(&mut g, false);
            let x = g.constant(x);
            let v = forward::pose_encoder(&mut g, &p, &self.config, x);
            parts.push(g.value(v).clone());
        }
        ensure!(!parts.is_empty(), "empty pose batch");
        Ok(Tensor::cat_rows(&parts.iter().collect::<Vec<_>>()))
    }

    /// Generates one image per row of `(vp, vc)` with `domain`'s generator.
    pub fn generate(&self, domain: Domain, vp: &Tensor<f32>, vc: &Tensor<f32>) -> Result<Vec<PersonImage>> {
        let cfg = &self.config;
        ensure!(
            vp.shape().len() == 2 && vp.shape()[1] == cfg.pose_dim,
            "pose feature shape {:?} does not match pose_dim {}",
            vp.shape(),
            cfg.pose_dim
        );
        ensure!(
            vc.shape().len() == 2 && vc.shape()[1] == cfg.content_dim,
            "content feature shape {:?} does not match content_dim {}",
            vc.shape(),
            cfg.content_dim
        );
        ensure!(vp.shape()[0] == vc.shape()[0], "pose and content batches differ in size");
        ensure!(vp.shape()[0] > 0, "empty feature batch");
        let mut out = Vec::with_capacity(vp.shape()[0]);
        for start in (0..vp.shape()[0]).step_by(CHUNK) {
            let len = CHUNK.min(vp.shape()[0] - start);
            let mut g = Graph::new();
            let p = self.params.get(Group::generator(domain)).bind(&mut g, false);
            let a = g.constant(vp.rows(start, len));
            let b = g.constant(vc.rows(start, len));
            let y = forward::generator(&mut g, &p, cfg, a, b);
            out.extend(tensor_to_images(g.value(y))?);
        }
        Ok(out)
    }

    /// Probability that each image is a real image of `domain`.
    pub fn discriminate_domain(&self, domain: Domain, images: &[&PersonImage]) -> Result<Vec<f32>> {
        let (h, w) = self.dims();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let x = image_batch::<f32>(chunk, h, w)?;
            let mut g = Graph::new();
            let p = self.params.get(Group::discriminator(domain)).bind(&mut g, false);
            let x = g.constant(x);
            let s = forward::domain_discriminator(&mut g, &p, &self.config, x);
            out.extend_from_slice(g.value(s).data());
        }
        ensure!(!out.is_empty() || !images.is_empty(), "empty image batch");
        Ok(out)
    }

    /// Image/pose matching confidence maps `[N, 1, H', W']` from the `D_P`
    /// used by `domain`.
    pub fn discriminate_pose(&self, domain: Domain, images: &[&PersonImage], maps: &[&PoseMap]) -> Result<Tensor<f32>> {
        ensure!(images.len() == maps.len(), "{} images but {} pose maps", images.len(), maps.len());
        ensure!(!images.is_empty(), "empty image batch");
        let (h, w) = self.dims();
        for (i, (im, m)) in images.iter().zip(maps).enumerate() {
            ensure!(
                im.height() == m.height() && im.width() == m.width(),
                "pair {i}: image is {}x{} but pose map is {}x{}",
                im.height(),
                im.width(),
                m.height(),
                m.width()
            );
        }
        let mut parts = Vec::new();
        for (ci, cm) in images.chunks(CHUNK).zip(maps.chunks(CHUNK)) {
            let x = image_batch::<f32>(ci, h, w)?;
            let pm = pose_batch::<f32>(cm, h, w)?;
            let mut g = Graph::new();
            let p = self.params.get(self.params.pose_disc_group(domain)).bind(&mut g, false);
            let x = g.constant(x);
            let pm = g.constant(pm);
            let c = forward::pose_discriminator(&mut g, &p, &self.config, x, pm);
            parts.push(g.value(c).clone());
        }
        Ok(Tensor::cat_rows(&parts.iter().collect::<Vec<_>>()))
    }
}

impl From<autograd::ShapeMismatch> for Error {
    fn from(e: autograd::ShapeMismatch) -> Self {
        Error::InvalidArgument(e.to_string())
    }
}
