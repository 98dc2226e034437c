//! Stick-figure avatars: identity appearance, articulated pose sampling and
//! anti-aliased rasterisation.
//!
//! Geometry is authored in a canonical 64x32 frame and scaled to the output
//! resolution. Keypoints follow the 18-point COCO/OpenPose order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Keypoint, Keypoints, NUM_KEYPOINTS};
use crate::error::{ensure, Result};

/// Linear RGB colour with channels in `[0, 1]`.
pub type Rgb = [f32; 3];

pub const NOSE: usize = 0;
pub const NECK: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const R_ELBOW: usize = 3;
pub const R_WRIST: usize = 4;
pub const L_SHOULDER: usize = 5;
pub const L_ELBOW: usize = 6;
pub const L_WRIST: usize = 7;
pub const R_HIP: usize = 8;
pub const R_KNEE: usize = 9;
pub const R_ANKLE: usize = 10;
pub const L_HIP: usize = 11;
pub const L_KNEE: usize = 12;
pub const L_ANKLE: usize = 13;
pub const R_EYE: usize = 14;
pub const L_EYE: usize = 15;
pub const R_EAR: usize = 16;
pub const L_EAR: usize = 17;

const CANON_H: f32 = 64.0;
const CANON_W: f32 = 32.0;

pub fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f32, f32)) -> f32 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn check_range(name: &str, r: (f32, f32), lo: f32, hi: f32) -> Result<()> {
    ensure!(
        r.0 <= r.1 && r.0 >= lo && r.1 <= hi,
        "{name} range [{}, {}] must be ordered and within [{lo}, {hi}]",
        r.0,
        r.1
    );
    Ok(())
}

fn check_prob(name: &str, p: f32) -> Result<()> {
    ensure!((0.0..=1.0).contains(&p), "{name} must be a probability, got {p}");
    Ok(())
}

/// Everything that makes one synthetic person recognisable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub shirt: Rgb,
    pub pants: Rgb,
    pub skin: Rgb,
    pub hair: Rgb,
    pub shoes: Rgb,
    pub stripes: Option<Rgb>,
    pub bag: Option<Rgb>,
    pub long_sleeves: bool,
    pub shorts: bool,
    /// Body width multiplier.
    pub build: f32,
    /// Limb length multiplier.
    pub stature: f32,
}

/// Distribution that identity appearances are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceSpec {
    pub saturation: (f32, f32),
    pub value: (f32, f32),
    pub build: (f32, f32),
    pub stature: (f32, f32),
    pub stripe_prob: f32,
    pub bag_prob: f32,
    pub long_sleeve_prob: f32,
    pub shorts_prob: f32,
}

impl Default for AppearanceSpec {
    fn default() -> Self {
        Self {
            saturation: (0.45, 1.0),
            value: (0.35, 1.0),
            build: (0.85, 1.2),
            stature: (0.92, 1.05),
            stripe_prob: 0.3,
            bag_prob: 0.3,
            long_sleeve_prob: 0.5,
            shorts_prob: 0.3,
        }
    }
}

const SKIN_TONES: [Rgb; 5] =
    [[0.98, 0.84, 0.71], [0.91, 0.72, 0.56], [0.78, 0.57, 0.40], [0.55, 0.38, 0.26], [0.36, 0.24, 0.16]];
const HAIR_TONES: [Rgb; 5] =
    [[0.08, 0.06, 0.05], [0.30, 0.18, 0.09], [0.62, 0.45, 0.22], [0.85, 0.72, 0.45], [0.55, 0.55, 0.55]];

impl AppearanceSpec {
    pub fn validate(&self) -> Result<()> {
        check_range("appearance.saturation", self.saturation, 0.0, 1.0)?;
        check_range("appearance.value", self.value, 0.0, 1.0)?;
        check_range("appearance.build", self.build, 0.5, 1.5)?;
        check_range("appearance.stature", self.stature, 0.7, 1.1)?;
        check_prob("appearance.stripe_prob", self.stripe_prob)?;
        check_prob("appearance.bag_prob", self.bag_prob)?;
        check_prob("appearance.long_sleeve_prob", self.long_sleeve_prob)?;
        check_prob("appearance.shorts_prob", self.shorts_prob)?;
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Appearance {
        let colour = |rng: &mut R| {
            let h = rng.random_range(0.0..360.0);
            hsv(h, uniform(rng, self.saturation), uniform(rng, self.value))
        };
        let shirt = colour(rng);
        let pants = colour(rng);
        let shoes = colour(rng);
        let stripes = rng.random_bool(self.stripe_prob as f64).then(|| colour(rng));
        let bag = rng.random_bool(self.bag_prob as f64).then(|| colour(rng));
        Appearance {
            shirt,
            pants,
            skin: SKIN_TONES[rng.random_range(0..SKIN_TONES.len())],
            hair: HAIR_TONES[rng.random_range(0..HAIR_TONES.len())],
            shoes,
            stripes,
            bag,
            long_sleeves: rng.random_bool(self.long_sleeve_prob as f64),
            shorts: rng.random_bool(self.shorts_prob as f64),
            build: uniform(rng, self.build),
            stature: uniform(rng, self.stature),
        }
    }
}

/// Which way the avatar faces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Front,
    Back,
    /// Facing towards smaller x.
    Left,
    /// Facing towards larger x.
    Right,
}

/// Distribution over articulated poses. Angles are in degrees, offsets in
/// canonical (64x32) pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSpec {
    pub arm_swing: f32,
    pub arm_raise_prob: f32,
    pub elbow_bend: f32,
    pub leg_swing: f32,
    pub knee_bend: f32,
    pub shift_x: f32,
    pub shift_y: f32,
    pub scale: (f32, f32),
    pub side_prob: f32,
    pub back_prob: f32,
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self {
            arm_swing: 50.0,
            arm_raise_prob: 0.2,
            elbow_bend: 60.0,
            leg_swing: 25.0,
            knee_bend: 35.0,
            shift_x: 3.0,
            shift_y: 2.0,
            scale: (0.9, 1.05),
            side_prob: 0.3,
            back_prob: 0.2,
        }
    }
}

fn deg(a: f32) -> f32 {
    a.to_radians()
}

impl PoseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v, hi) in [
            ("pose.arm_swing", self.arm_swing, 90.0),
            ("pose.elbow_bend", self.elbow_bend, 150.0),
            ("pose.leg_swing", self.leg_swing, 60.0),
            ("pose.knee_bend", self.knee_bend, 120.0),
            ("pose.shift_x", self.shift_x, 6.0),
            ("pose.shift_y", self.shift_y, 4.0),
        ] {
            ensure!((0.0..=hi).contains(&v), "{name} must lie in [0, {hi}], got {v}");
        }
        check_range("pose.scale", self.scale, 0.6, 1.1)?;
        check_prob("pose.arm_raise_prob", self.arm_raise_prob)?;
        check_prob("pose.side_prob", self.side_prob)?;
        check_prob("pose.back_prob", self.back_prob)?;
        ensure!(self.side_prob + self.back_prob <= 1.0, "pose.side_prob + pose.back_prob must not exceed 1");
        Ok(())
    }

    /// Draws a pose for a body with the given proportions and returns its
    /// keypoints in a `height x width` image, rounded to pixel centres.
    /// Points falling outside the image are marked invisible.
    pub fn sample<R: Rng + ?Sized>(&self, app: &Appearance, height: usize, width: usize, rng: &mut R) -> Keypoints {
        let u: f32 = rng.random();
        let view = if u < self.back_prob {
            View::Back
        } else if u < self.back_prob + self.side_prob {
            if rng.random_bool(0.5) {
                View::Left
            } else {
                View::Right
            }
        } else {
            View::Front
        };
        let side = matches!(view, View::Left | View::Right);
        let facing = match view {
            View::Left => -1.0,
            _ => 1.0,
        };
        let wd = app.build;
        let ht = app.stature;
        let mut p = [[0.0f32; 2]; NUM_KEYPOINTS];
        let mut vis = [true; NUM_KEYPOINTS];

        let neck = [16.0, 16.0];
        p[NECK] = neck;
        // Image-space side of the person's right limbs.
        let right_sign = if view == View::Back { 1.0 } else { -1.0 };
        let sw = if side { 1.5 * wd } else { 5.0 * wd };
        let hw = if side { 1.0 * wd } else { 3.0 * wd };
        p[R_SHOULDER] = [16.0 + right_sign * sw, 17.0];
        p[L_SHOULDER] = [16.0 - right_sign * sw, 17.0];
        let hip_y = 16.0 + 18.0 * ht;
        p[R_HIP] = [16.0 + right_sign * hw, hip_y];
        p[L_HIP] = [16.0 - right_sign * hw, hip_y];

        let limb = |start: [f32; 2], angle: f32, len: f32, out: f32| -> [f32; 2] {
            [start[0] + out * len * angle.sin(), start[1] + len * angle.cos()]
        };
        for (sh, el, wr, sign) in
            [(R_SHOULDER, R_ELBOW, R_WRIST, right_sign), (L_SHOULDER, L_ELBOW, L_WRIST, -right_sign)]
        {
            let out = if side { facing } else { sign };
            let a = if rng.random_bool(self.arm_raise_prob as f64) {
                deg(rng.random_range(110.0..165.0))
            } else if side {
                deg(uniform(rng, (-self.arm_swing, self.arm_swing)))
            } else {
                deg(uniform(rng, (0.0, self.arm_swing)))
            };
            let bend = deg(uniform(rng, (0.0, self.elbow_bend)));
            p[el] = limb(p[sh], a, 9.0 * ht, out);
            p[wr] = limb(p[el], a + bend, 8.0 * ht, out);
        }
        for (hip, knee, ankle, sign) in [(R_HIP, R_KNEE, R_ANKLE, right_sign), (L_HIP, L_KNEE, L_ANKLE, -right_sign)] {
            let out = if side { facing } else { sign };
            let a = if side {
                deg(uniform(rng, (-self.leg_swing, self.leg_swing)))
            } else {
                deg(uniform(rng, (-0.3 * self.leg_swing, self.leg_swing)))
            };
            let bend = deg(uniform(rng, (0.0, self.knee_bend)));
            p[knee] = limb(p[hip], a, 11.0 * ht, out);
            let shin = if side { a - bend } else { a - 0.3 * bend };
            p[ankle] = limb(p[knee], shin, 11.0 * ht, out);
        }

        match view {
            View::Front | View::Back => {
                p[NOSE] = [16.0, 10.0];
                p[R_EYE] = [16.0 + right_sign * 1.5, 8.0];
                p[L_EYE] = [16.0 - right_sign * 1.5, 8.0];
                p[R_EAR] = [16.0 + right_sign * 4.0, 9.0];
                p[L_EAR] = [16.0 - right_sign * 4.0, 9.0];
                if view == View::Back {
                    vis[NOSE] = false;
                    vis[R_EYE] = false;
                    vis[L_EYE] = false;
                }
            }
            View::Left | View::Right => {
                // The near side faces the camera; its eye and ear are visible.
                let (near_eye, far_eye, near_ear, far_ear) =
                    if view == View::Left { (R_EYE, L_EYE, R_EAR, L_EAR) } else { (L_EYE, R_EYE, L_EAR, R_EAR) };
                p[NOSE] = [16.0 + facing * 4.0, 10.0];
                p[near_eye] = [16.0 + facing * 2.5, 8.0];
                p[far_eye] = [16.0 + facing * 1.5, 8.0];
                p[near_ear] = [16.0 - facing * 1.0, 9.0];
                p[far_ear] = [16.0 + facing * 1.0, 9.0];
                vis[far_eye] = false;
                vis[far_ear] = false;
            }
        }

        let scale = uniform(rng, self.scale);
        let dx = uniform(rng, (-self.shift_x, self.shift_x));
        let dy = uniform(rng, (-self.shift_y, self.shift_y));
        let (sx, sy) = (width as f32 / CANON_W, height as f32 / CANON_H);
        let points = std::array::from_fn(|i| {
            let cx = 16.0 + (p[i][0] - 16.0) * scale + dx;
            let cy = 36.0 + (p[i][1] - 36.0) * scale + dy;
            let x = (cx * sx).round();
            let y = (cy * sy).round();
            let inside = x >= 0.0 && y >= 0.0 && x < width as f32 && y < height as f32;
            Keypoint { x, y, visible: vis[i] && inside }
        });
        Keypoints::from_points_unchecked(points)
    }
}

/// Infers the facing direction from the face keypoints.
pub fn view_of(kp: &Keypoints) -> View {
    let p = kp.points();
    if p[NOSE].visible && p[R_EYE].visible && p[L_EYE].visible {
        View::Front
    } else if !p[NOSE].visible && !p[R_EYE].visible && !p[L_EYE].visible {
        View::Back
    } else {
        let ear_mid = 0.5 * (p[R_EAR].x + p[L_EAR].x);
        if p[NOSE].x < ear_mid {
            View::Left
        } else {
            View::Right
        }
    }
}

fn seg_dist(px: f32, py: f32, a: [f32; 2], b: [f32; 2]) -> f32 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a[0] + t * dx - px, a[1] + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// An RGB canvas plus the per-pixel body coverage painted so far.
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    /// Row-major `[y][x]` colours.
    pub pixels: Vec<Rgb>,
    /// Row-major body coverage in `[0, 1]`.
    pub mask: Vec<f32>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, background: Vec<Rgb>) -> Self {
        assert_eq!(background.len(), height * width);
        Self { height, width, pixels: background, mask: vec![0.0; height * width] }
    }

    /// Paints a capsule of radius `r` around segment `a..b` with
    /// anti-aliased edges. `colour` may vary per pixel and `clip` can reject
    /// pixels.
    fn capsule(
        &mut self,
        a: [f32; 2],
        b: [f32; 2],
        r: f32,
        colour: impl Fn(f32, f32) -> Rgb,
        clip: impl Fn(f32, f32) -> bool,
    ) {
        let x0 = (a[0].min(b[0]) - r - 1.0).floor().max(0.0) as usize;
        let y0 = (a[1].min(b[1]) - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((a[0].max(b[0]) + r + 1.0).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((a[1].max(b[1]) + r + 1.0).ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (fx, fy) = (x as f32, y as f32);
                if !clip(fx, fy) {
                    continue;
                }
                let alpha = (r + 0.5 - seg_dist(fx, fy, a, b)).clamp(0.0, 1.0);
                if alpha <= 0.0 {
                    continue;
                }
                let i = y * self.width + x;
                let c = colour(fx, fy);
                for (dst, src) in self.pixels[i].iter_mut().zip(c) {
                    *dst = alpha * src + (1.0 - alpha) * *dst;
                }
                self.mask[i] = self.mask[i].max(alpha);
            }
        }
    }
}

fn solid(c: Rgb) -> impl Fn(f32, f32) -> Rgb {
    move |_, _| c
}

fn everywhere(_: f32, _: f32) -> bool {
    true
}

/// Paints the avatar described by `app` at pose `kp` onto `canvas`.
pub fn draw_avatar(canvas: &mut Canvas, app: &Appearance, kp: &Keypoints) {
    let k = canvas.height as f32 / CANON_H;
    let p: Vec<[f32; 2]> = kp.points().iter().map(|q| [q.x, q.y]).collect();
    let view = view_of(kp);
    let side = matches!(view, View::Left | View::Right);
    let wd = app.build;
    let mid = |a: [f32; 2], b: [f32; 2]| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
    let hip_mid = mid(p[R_HIP], p[L_HIP]);
    let head = mid(p[R_EAR], p[L_EAR]);

    if let Some(bag) = app.bag {
        let at = [p[R_HIP][0] + (p[R_HIP][0] - hip_mid[0]).signum() * 2.5 * k, p[R_HIP][1] - 2.0 * k];
        canvas.capsule(at, at, 3.0 * k, solid(bag), everywhere);
    }
    for (hip, knee, ankle) in [(R_HIP, R_KNEE, R_ANKLE), (L_HIP, L_KNEE, L_ANKLE)] {
        canvas.capsule(p[hip], p[knee], 2.2 * k * wd, solid(app.pants), everywhere);
        let shin = if app.shorts { app.skin } else { app.pants };
        canvas.capsule(p[knee], p[ankle], 1.8 * k * wd, solid(shin), everywhere);
        canvas.capsule(p[ankle], p[ankle], 2.0 * k, solid(app.shoes), everywhere);
    }
    let torso_r = if side { 3.2 } else { 4.6 } * k * wd;
    let top = [p[NECK][0], p[NECK][1] + 1.0 * k];
    let band = 2.5 * k;
    let shirt = app.shirt;
    let stripes = app.stripes;
    let torso_colour = move |_: f32, y: f32| match stripes {
        Some(s) if ((y / band).floor() as i64).rem_euclid(2) == 0 => s,
        _ => shirt,
    };
    canvas.capsule(top, hip_mid, torso_r, torso_colour, everywhere);
    for (sh, el, wr) in [(R_SHOULDER, R_ELBOW, R_WRIST), (L_SHOULDER, L_ELBOW, L_WRIST)] {
        canvas.capsule(p[sh], p[el], 1.6 * k, solid(app.shirt), everywhere);
        let fore = if app.long_sleeves { app.shirt } else { app.skin };
        canvas.capsule(p[el], p[wr], 1.4 * k, solid(fore), everywhere);
        canvas.capsule(p[wr], p[wr], 1.5 * k, solid(app.skin), everywhere);
    }
    canvas.capsule(p[NECK], head, 1.5 * k, solid(app.skin), everywhere);
    let head_r = 4.2 * k;
    match view {
        View::Back => canvas.capsule(head, head, head_r + 0.2 * k, solid(app.hair), everywhere),
        View::Front => {
            canvas.capsule(head, head, head_r, solid(app.skin), everywhere);
            let cut = head[1] - 1.0 * k;
            canvas.capsule(head, head, head_r + 0.2 * k, solid(app.hair), move |_, y| y < cut);
        }
        View::Left | View::Right => {
            canvas.capsule(head, head, head_r, solid(app.skin), everywhere);
            let facing = if view == View::Left { -1.0 } else { 1.0 };
            let (cx, cut) = (head[0], head[1] - 1.0 * k);
            canvas.capsule(head, head, head_r + 0.2 * k, solid(app.hair), move |x, y| {
                y < cut || (x - cx) * facing < -0.5 * k
            });
        }
    }
}
