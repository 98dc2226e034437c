//! Synthetic two-domain person dataset: avatars with ground-truth keypoints,
//! Gaussian pose heatmaps and the samplers used by training.

pub mod avatar;
mod io;
pub mod style;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use avatar::{Appearance, AppearanceSpec, PoseSpec, Rgb, View};
pub use io::{load_dataset, save_dataset, KEYPOINTS_FILE, META_FILE};
pub use style::{Background, ColourTransform, DomainStyle};

use crate::error::{ensure, Result};
use crate::pixels;

pub const NUM_KEYPOINTS: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

/// The 18 body landmarks of one image. Coordinates of invisible points are
/// kept (they may lie outside the image) but carry no meaning for heatmaps.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints {
    points: [Keypoint; NUM_KEYPOINTS],
}

impl Keypoints {
    /// Checks the count and that visible points lie inside `height x width`.
    pub fn new(points: &[Keypoint], height: usize, width: usize) -> Result<Self> {
        ensure!(points.len() == NUM_KEYPOINTS, "expected {NUM_KEYPOINTS} keypoints, got {}", points.len());
        let kp = Self { points: std::array::from_fn(|i| points[i]) };
        kp.check_bounds(height, width)?;
        Ok(kp)
    }

    pub(crate) fn from_points_unchecked(points: [Keypoint; NUM_KEYPOINTS]) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[Keypoint; NUM_KEYPOINTS] {
        &self.points
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.visible {
                ensure!(
                    p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0,
                    "visible keypoint {i} at ({}, {}) is outside the image",
                    p.x,
                    p.y
                );
                ensure!(
                    p.x < width as f32 && p.y < height as f32,
                    "visible keypoint {i} at ({}, {}) is outside the {height}x{width} image",
                    p.x,
                    p.y
                );
            }
        }
        Ok(())
    }
}

/// Gaussian heatmap stack, channel-major `[18, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PoseMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-pixel maximum over channels, `[H, W]` row-major.
    pub fn max_projection(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; plane];
        for ch in self.data.chunks(plane) {
            for (o, &v) in out.iter_mut().zip(ch) {
                *o = o.max(v);
            }
        }
        out
    }
}

/// Renders one Gaussian bump per visible landmark:
/// `exp(-((x - xc)^2 + (y - yc)^2) / (2 sigma^2))`. Values below the smallest
/// normal `f32` are stored as zero; subnormals slow every downstream matmul.
pub fn render_pose_map(kp: &Keypoints, sigma: f32, height: usize, width: usize) -> Result<PoseMap> {
    ensure!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive, got {sigma}");
    ensure!(height > 0 && width > 0, "pose map size must be non-empty");
    kp.check_bounds(height, width)?;
    let plane = height * width;
    let mut data = vec![0.0f32; NUM_KEYPOINTS * plane];
    let denom = 2.0 * sigma * sigma;
    for (c, p) in kp.points.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let ch = &mut data[c * plane..(c + 1) * plane];
        for y in 0..height {
            let dy = y as f32 - p.y;
            for x in 0..width {
                let dx = x as f32 - p.x;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                ch[y * width + x] = if v < f32::MIN_POSITIVE { 0.0 } else { v };
            }
        }
    }
    Ok(PoseMap { height, width, data })
}

/// Image with values in `[-1, 1]`, stored channel-major `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PersonImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "image size must be non-empty");
        ensure!(data.len() == 3 * height * width, "expected {} values for a {height}x{width} image, got {}", 3 * height * width, data.len());
        ensure!(data.iter().all(|v| (-1.0..=1.0).contains(v)), "image values must lie in [-1, 1]");
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Interleaved 8-bit RGB, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push(pixels::to_u8(self.data[c * plane + i]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let plane = height * width;
        ensure!(rgb.len() == 3 * plane, "expected {} bytes, got {}", 3 * plane, rgb.len());
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = pixels::from_u8(rgb[3 * i + c]);
            }
        }
        Self::new(height, width, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    /// Single-letter tag used in route names, e.g. `s2t`.
    pub fn letter(self) -> char {
        match self {
            Domain::Source => 's',
            Domain::Target => 't',
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "s" => Ok(Domain::Source),
            "target" | "t" => Ok(Domain::Target),
            other => Err(crate::Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Identities per domain.
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Heatmap standard deviation in pixels.
    pub sigma: f32,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` colour units.
    pub noise: f32,
    pub appearance: AppearanceSpec,
    pub pose: PoseSpec,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            identities: 50,
            images_per_identity: 6,
            height: 64,
            width: 32,
            sigma: 1.5,
            seed: 0,
            noise: 0.02,
            appearance: AppearanceSpec::default(),
            pose: PoseSpec::default(),
            source_style: DomainStyle::default_source(),
            target_style: DomainStyle::default_target(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.identities >= 2, "identities must be at least 2, got {}", self.identities);
        ensure!(
            self.images_per_identity >= 2,
            "images_per_identity must be at least 2, got {}",
            self.images_per_identity
        );
        ensure!(self.height >= 16 && self.width >= 8, "image size must be at least 16x8");
        ensure!(self.sigma > 0.0 && self.sigma.is_finite(), "sigma must be positive");
        ensure!((0.0..=0.5).contains(&self.noise), "noise must lie in [0, 0.5]");
        self.appearance.validate()?;
        self.pose.validate()?;
        self.source_style.validate()?;
        self.target_style.validate()
    }
}

/// All images of one domain together with their annotations.
#[derive(Clone, Debug)]
pub struct DomainData {
    domain: Domain,
    images: Vec<PersonImage>,
    keypoints: Vec<Keypoints>,
    identities: Vec<u32>,
    pose_maps: Vec<PoseMap>,
    appearances: BTreeMap<u32, Appearance>,
    /// Image indices per identity, in order of first appearance.
    groups: Vec<(u32, Vec<usize>)>,
}

/// Indices of an (anchor, positive, negative) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Indices of two distinct images of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosePair {
    pub first: usize,
    pub second: usize,
}

impl DomainData {
    pub fn new(
        domain: Domain,
        images: Vec<PersonImage>,
        keypoints: Vec<Keypoints>,
        identities: Vec<u32>,
        appearances: BTreeMap<u32, Appearance>,
        sigma: f32,
    ) -> Result<Self> {
        ensure!(!images.is_empty(), "{domain} domain has no images");
        ensure!(
            images.len() == keypoints.len() && images.len() == identities.len(),
            "{domain} domain: {} images, {} keypoint records, {} labels",
            images.len(),
            keypoints.len(),
            identities.len()
        );
        let (h, w) = (images[0].height(), images[0].width());
        ensure!(
            images.iter().all(|im| im.height() == h && im.width() == w),
            "{domain} domain mixes image sizes"
        );
        let pose_maps = keypoints.iter().map(|kp| render_pose_map(kp, sigma, h, w)).collect::<Result<Vec<_>>>()?;
        let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
        let mut slot = BTreeMap::new();
        for (i, &id) in identities.iter().enumerate() {
            let g = *slot.entry(id).or_insert_with(|| {
                groups.push((id, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        Ok(Self { domain, images, keypoints, identities, pose_maps, appearances, groups })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn images(&self) -> &[PersonImage] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &PersonImage {
        &self.images[i]
    }

    pub fn keypoints(&self, i: usize) -> &Keypoints {
        &self.keypoints[i]
    }

    pub fn pose_map(&self, i: usize) -> &PoseMap {
        &self.pose_maps[i]
    }

    pub fn identity(&self, i: usize) -> u32 {
        self.identities[i]
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    pub fn appearance(&self, id: u32) -> Option<&Appearance> {
        self.appearances.get(&id)
    }

    pub fn appearances(&self) -> &BTreeMap<u32, Appearance> {
        &self.appearances
    }

    /// Distinct identities in order of first appearance.
    pub fn identity_list(&self) -> Vec<u32> {
        self.groups.iter().map(|(id, _)| *id).collect()
    }

    /// Image indices of each identity.
    pub fn groups(&self) -> &[(u32, Vec<usize>)] {
        &self.groups
    }

    /// Checks that triplets and pose pairs can be drawn.
    pub fn check_sampleable(&self) -> Result<()> {
        ensure!(self.groups.len() >= 2, "{} domain needs at least 2 identities, has {}", self.domain, self.groups.len());
        ensure!(
            self.groups.iter().all(|(_, g)| g.len() >= 2),
            "every {} identity needs at least 2 images",
            self.domain
        );
        Ok(())
    }

    /// Identity-grouped sampling assumes [`DomainData::check_sampleable`] holds.
    fn two_of<R: Rng + ?Sized>(group: &[usize], rng: &mut R) -> (usize, usize) {
        let a = rng.random_range(0..group.len());
        let mut b = rng.random_range(0..group.len() - 1);
        if b >= a {
            b += 1;
        }
        (group[a], group[b])
    }

    pub fn sample_triplet<R: Rng + ?Sized>(&self, rng: &mut R) -> Triplet {
        let n = self.groups.len();
        let g = rng.random_range(0..n);
        let (anchor, positive) = Self::two_of(&self.groups[g].1, rng);
        let mut h = rng.random_range(0..n - 1);
        if h >= g {
            h += 1;
        }
        let others = &self.groups[h].1;
        let negative = others[rng.random_range(0..others.len())];
        Triplet { anchor, positive, negative }
    }

    pub fn sample_pose_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> PosePair {
        let g = rng.random_range(0..self.groups.len());
        let (first, second) = Self::two_of(&self.groups[g].1, rng);
        PosePair { first, second }
    }

    /// `n` pose pairs whose identities are distinct while `n` does not
    /// exceed the number of identities.
    pub fn sample_pair_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<PosePair> {
        let mut order: Vec<usize> = Vec::with_capacity(n);
        while order.len() < n {
            let mut ids: Vec<usize> = (0..self.groups.len()).collect();
            ids.shuffle(rng);
            order.extend(ids.into_iter().take(n - order.len()));
        }
        order
            .into_iter()
            .map(|g| {
                let (first, second) = Self::two_of(&self.groups[g].1, rng);
                PosePair { first, second }
            })
            .collect()
    }

    /// `n` distinct image indices (with repetition only if `n > len`).
    pub fn sample_images<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut idx: Vec<usize> = (0..self.len()).collect();
            idx.shuffle(rng);
            out.extend(idx.into_iter().take(n - out.len()));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub source: DomainData,
    pub target: DomainData,
}

impl Dataset {
    pub fn new(spec: SynthSpec, source: DomainData, target: DomainData) -> Result<Self> {
        source.check_sampleable()?;
        ensure!(
            source.height() == target.height() && source.width() == target.width(),
            "source and target image sizes differ"
        );
        let src: std::collections::BTreeSet<u32> = source.identities.iter().copied().collect();
        ensure!(
            target.identities.iter().all(|id| !src.contains(id)),
            "source and target share identities"
        );
        Ok(Self { spec, source, target })
    }

    pub fn domain(&self, d: Domain) -> &DomainData {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn height(&self) -> usize {
        self.source.height()
    }

    pub fn width(&self) -> usize {
        self.source.width()
    }
}

/// Renders an avatar at `kp` over `background` and applies `colour`,
/// returning `[0, 1]` colours and the body coverage mask.
pub fn render_avatar(
    app: &Appearance,
    kp: &Keypoints,
    background: Vec<Rgb>,
    colour: &ColourTransform,
    height: usize,
    width: usize,
) -> avatar::Canvas {
    let mut canvas = avatar::Canvas::new(height, width, background);
    avatar::draw_avatar(&mut canvas, app, kp);
    if !colour.is_identity() {
        for p in &mut canvas.pixels {
            *p = colour.apply(*p);
        }
    }
    canvas
}

fn to_person_image<R: Rng + ?Sized>(pixels: &[Rgb], noise: f32, height: usize, width: usize, rng: &mut R) -> PersonImage {
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    let normal = (noise > 0.0).then(|| Normal::new(0.0f32, noise).expect("valid noise"));
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            let n = normal.as_ref().map_or(0.0, |d| d.sample(rng));
            let v = (p[c] + n).clamp(0.0, 1.0);
            data[c * plane + i] = pixels::quantize(2.0 * v - 1.0);
        }
    }
    PersonImage { height, width, data }
}

fn synthesize_domain<R: Rng + ?Sized>(spec: &SynthSpec, domain: Domain, first_id: u32, rng: &mut R) -> Result<DomainData> {
    let style = match domain {
        Domain::Source => &spec.source_style,
        Domain::Target => &spec.target_style,
    };
    let (h, w) = (spec.height, spec.width);
    let n = spec.identities * spec.images_per_identity;
    let mut images = Vec::with_capacity(n);
    let mut keypoints = Vec::with_capacity(n);
    let mut identities = Vec::with_capacity(n);
    let mut appearances = BTreeMap::new();
    for k in 0..spec.identities {
        let id = first_id + k as u32;
        let app = spec.appearance.sample(rng);
        for _ in 0..spec.images_per_identity {
            let kp = spec.pose.sample(&app, h, w, rng);
            let bg = style.background.render(h, w, rng);
            let canvas = render_avatar(&app, &kp, bg, &style.colour, h, w);
            images.push(to_person_image(&canvas.pixels, spec.noise, h, w, rng));
            keypoints.push(kp);
            identities.push(id);
        }
        appearances.insert(id, app);
    }
    DomainData::new(domain, images, keypoints, identities, appearances, spec.sigma)
}

/// Generates both domains. Source identities are `0..n`, target identities
/// `n..2n`; only the target receives the target style.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source = synthesize_domain(spec, Domain::Source, 0, &mut rng)?;
    let target = synthesize_domain(spec, Domain::Target, spec.identities as u32, &mut rng)?;
    Dataset::new(spec.clone(), source, target)
}
