//! Pose consistency of generated images: do body parts land where the
//! requested pose puts them?
//!
//! Each probe combines the pose of one image with the content of an image of
//! another identity from the same domain. The synthetic renderer draws that
//! identity at that pose, and a small template around every visible keypoint
//! of the rendering is searched for in the generated image. A keypoint counts
//! as reproduced when the best normalised cross-correlation sits within
//! [`POSE_TOLERANCE`] pixels of the requested position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{render_avatar, Dataset, Domain, PersonImage, PoseMap};
use crate::error::{ensure, Result};
use crate::networks::Model;

/// Maximum keypoint displacement, in pixels, that still counts as a match.
pub const POSE_TOLERANCE: f64 = 3.0;
const RADIUS: i64 = 4;
const SEARCH: i64 = 6;
const MIN_PIXELS: usize = 8;
const MIN_VARIANCE: f64 = 1e-6;
const MASK_THRESHOLD: f32 = 0.5;
const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const CHUNK: usize = 64;

/// Pose taken from image `pose`, content from image `content`, both in
/// `domain`, rendered by that domain's generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub domain: Domain,
    pub pose: usize,
    pub content: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub per_domain: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { per_domain: 64, seed: 0 }
    }
}

/// Draws `per_domain` probes in each domain; content and pose always come
/// from different identities.
pub fn sample_probes(data: &Dataset, spec: &ProbeSpec) -> Result<Vec<Probe>> {
    ensure!(spec.per_domain > 0, "need at least one probe per domain");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut probes = Vec::with_capacity(2 * spec.per_domain);
    for domain in [Domain::Source, Domain::Target] {
        let d = data.domain(domain);
        ensure!(d.groups().len() >= 2, "{domain} domain needs two identities for pose probes");
        for _ in 0..spec.per_domain {
            let pose = rng.random_range(0..d.len());
            let content = loop {
                let j = rng.random_range(0..d.len());
                if d.identity(j) != d.identity(pose) {
                    break j;
                }
            };
            probes.push(Probe { domain, pose, content });
        }
    }
    Ok(probes)
}

/// Colours in `[0, 1]`, row-major `[y][x]`, of an image in `[-1, 1]`.
fn to_rgb(im: &PersonImage) -> Vec<[f64; 3]> {
    let plane = im.height() * im.width();
    let d = im.data();
    (0..plane).map(|i| std::array::from_fn(|c| (d[c * plane + i] as f64 + 1.0) / 2.0)).collect()
}

struct Template {
    /// Pixel offsets relative to the keypoint and reference colours.
    pixels: Vec<(i64, i64, [f64; 3])>,
    cy: i64,
    cx: i64,
}

/// Per-channel mean-centred correlation over the template pixels, or `None`
/// when the generated patch is flat.
fn ncc(t: &Template, gen: &[[f64; 3]], w: i64, oy: i64, ox: i64) -> Option<f64> {
    let n = t.pixels.len() as f64;
    let mut tm = [0.0; 3];
    let mut gm = [0.0; 3];
    let at = |dy: i64, dx: i64| gen[((t.cy + oy + dy) * w + t.cx + ox + dx) as usize];
    for &(dy, dx, c) in &t.pixels {
        let g = at(dy, dx);
        for k in 0..3 {
            tm[k] += c[k] / n;
            gm[k] += g[k] / n;
        }
    }
    let (mut cross, mut tt, mut gg) = (0.0, 0.0, 0.0);
    for &(dy, dx, c) in &t.pixels {
        let g = at(dy, dx);
        for k in 0..3 {
            let (a, b) = (c[k] - tm[k], g[k] - gm[k]);
            cross += a * b;
            tt += a * a;
            gg += b * b;
        }
    }
    (gg / n > MIN_VARIANCE).then(|| cross / (tt * gg).sqrt())
}

/// Outcome for one keypoint: `None` if it cannot be judged, otherwise
/// whether the best match lies within tolerance.
fn keypoint_matches(reference: &crate::datagen::avatar::Canvas, gen: &[[f64; 3]], x: f32, y: f32) -> Option<bool> {
    let (h, w) = (reference.height as i64, reference.width as i64);
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    if cx < 0 || cy < 0 || cx >= w || cy >= h {
        return None;
    }
    let mut pixels = Vec::new();
    for dy in -RADIUS..=RADIUS {
        for dx in -RADIUS..=RADIUS {
            let (py, px) = (cy + dy, cx + dx);
            if py < 0 || px < 0 || py >= h || px >= w {
                continue;
            }
            let i = (py * w + px) as usize;
            if reference.mask[i] >= MASK_THRESHOLD {
                pixels.push((dy, dx, reference.pixels[i].map(f64::from)));
            }
        }
    }
    if pixels.len() < MIN_PIXELS {
        return None;
    }
    let n = pixels.len() as f64;
    let var: f64 = (0..3)
        .map(|k| {
            let m = pixels.iter().map(|p| p.2[k]).sum::<f64>() / n;
            pixels.iter().map(|p| (p.2[k] - m).powi(2)).sum::<f64>() / n
        })
        .sum();
    if var < MIN_VARIANCE {
        return None;
    }
    let t = Template { pixels, cy, cx };
    let in_bounds = |oy: i64, ox: i64| {
        t.pixels.iter().all(|&(dy, dx, _)| {
            let (py, px) = (cy + oy + dy, cx + ox + dx);
            py >= 0 && px >= 0 && py < h && px < w
        })
    };
    let mut offsets: Vec<(i64, i64)> =
        (-SEARCH..=SEARCH).flat_map(|oy| (-SEARCH..=SEARCH).map(move |ox| (oy, ox))).collect();
    offsets.sort_by_key(|&(oy, ox)| (oy * oy + ox * ox, oy, ox));
    let mut best: Option<(f64, i64, i64)> = None;
    for (oy, ox) in offsets {
        if !in_bounds(oy, ox) {
            continue;
        }
        if let Some(s) = ncc(&t, gen, w, oy, ox) {
            if best.is_none_or(|b| s > b.0) {
                best = Some((s, oy, ox));
            }
        }
    }
    Some(best.is_some_and(|(_, oy, ox)| ((oy * oy + ox * ox) as f64).sqrt() <= POSE_TOLERANCE))
}

/// Scores the images `generate` returns for each domain's probes (in probe
/// order) against renderings of the requested identity and pose.
pub fn pose_consistency_with(
    data: &Dataset,
    probes: &[Probe],
    mut generate: impl FnMut(Domain, &[Probe]) -> Result<Vec<PersonImage>>,
) -> Result<f64> {
    let (h, w) = (data.height(), data.width());
    let (mut considered, mut matched) = (0usize, 0usize);
    for domain in [Domain::Source, Domain::Target] {
        let d = data.domain(domain);
        let style = match domain {
            Domain::Source => &data.spec.source_style,
            Domain::Target => &data.spec.target_style,
        };
        let mine: Vec<Probe> = probes.iter().filter(|p| p.domain == domain).copied().collect();
        for chunk in mine.chunks(CHUNK) {
            let out = generate(domain, chunk)?;
            ensure!(out.len() == chunk.len(), "generator returned {} images for {} probes", out.len(), chunk.len());
            for (p, im) in chunk.iter().zip(&out) {
                ensure!(im.height() == h && im.width() == w, "generated image is {}x{}, expected {h}x{w}", im.height(), im.width());
                let id = d.identity(p.content);
                let app = d.appearance(id).expect("every identity has an appearance");
                let kp = d.keypoints(p.pose);
                let reference = render_avatar(app, kp, vec![BACKGROUND; h * w], &style.colour, h, w);
                let gen = to_rgb(im);
                for k in kp.points().iter().filter(|k| k.visible) {
                    if let Some(ok) = keypoint_matches(&reference, &gen, k.x, k.y) {
                        considered += 1;
                        matched += ok as usize;
                    }
                }
            }
        }
    }
    ensure!(considered > 0, "no keypoint could be judged for pose consistency");
    Ok(matched as f64 / considered as f64)
}

/// Fraction of judged keypoints that `model` reproduces within
/// [`POSE_TOLERANCE`] pixels.
pub fn pose_consistency(model: &Model, data: &Dataset, spec: &ProbeSpec) -> Result<f64> {
    let probes = sample_probes(data, spec)?;
    pose_consistency_with(data, &probes, |domain, chunk| {
        let d = data.domain(domain);
        let content: Vec<&PersonImage> = chunk.iter().map(|p| d.image(p.content)).collect();
        let poses: Vec<&PoseMap> = chunk.iter().map(|p| d.pose_map(p.pose)).collect();
        let vc = model.encode_content(&content)?;
        let vp = model.encode_pose(&poses)?;
        model.generate(domain, &vp, &vc)
    })
}
