//! Per-domain backgrounds and global colour transforms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::avatar::{hsv, Rgb};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    /// Vertical gradient between two muted colours.
    Gradient { saturation: f32, value: (f32, f32) },
    /// Saturated base colour overlaid with random elliptical blobs.
    Clutter { blobs: usize, saturation: (f32, f32), value: (f32, f32) },
}

impl Default for Background {
    fn default() -> Self {
        Background::Gradient { saturation: 0.12, value: (0.35, 0.8) }
    }
}

impl Background {
    pub fn validate(&self) -> Result<()> {
        let (sat, val) = match self {
            Background::Gradient { saturation, value } => ((*saturation, *saturation), *value),
            Background::Clutter { saturation, value, .. } => (*saturation, *value),
        };
        ensure!(sat.0 <= sat.1 && sat.0 >= 0.0 && sat.1 <= 1.0, "background saturation must lie in [0, 1]");
        ensure!(val.0 <= val.1 && val.0 >= 0.0 && val.1 <= 1.0, "background value must lie in [0, 1]");
        Ok(())
    }

    pub fn render<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Vec<Rgb> {
        let pick = |rng: &mut R, s: (f32, f32), v: (f32, f32)| {
            let h = rng.random_range(0.0..360.0);
            let s = if s.1 > s.0 { rng.random_range(s.0..s.1) } else { s.0 };
            let v = if v.1 > v.0 { rng.random_range(v.0..v.1) } else { v.0 };
            hsv(h, s, v)
        };
        match self {
            Background::Gradient { saturation, value } => {
                let top = pick(rng, (0.0, *saturation), *value);
                let bottom = pick(rng, (0.0, *saturation), *value);
                let mut out = Vec::with_capacity(height * width);
                for y in 0..height {
                    let t = y as f32 / (height.max(2) - 1) as f32;
                    let c = std::array::from_fn(|i| top[i] + t * (bottom[i] - top[i]));
                    out.extend(std::iter::repeat_n(c, width));
                }
                out
            }
            Background::Clutter { blobs, saturation, value } => {
                let base = pick(rng, *saturation, *value);
                let mut out = vec![base; height * width];
                for _ in 0..*blobs {
                    let c = pick(rng, *saturation, *value);
                    let cx = rng.random_range(0.0..width as f32);
                    let cy = rng.random_range(0.0..height as f32);
                    let rx = rng.random_range(0.1..0.35) * width as f32;
                    let ry = rng.random_range(0.05..0.2) * height as f32;
                    for y in 0..height {
                        for x in 0..width {
                            let (u, v) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                            if u * u + v * v <= 1.0 {
                                out[y * width + x] = c;
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Global colour transform applied to every pixel of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColourTransform {
    /// Rotation about the grey axis, degrees.
    pub hue_shift: f32,
    pub saturation: f32,
    pub contrast: f32,
    pub brightness: f32,
}

impl Default for ColourTransform {
    fn default() -> Self {
        Self { hue_shift: 0.0, saturation: 1.0, contrast: 1.0, brightness: 0.0 }
    }
}

impl ColourTransform {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hue_shift.is_finite(), "hue_shift must be finite");
        ensure!((0.0..=2.0).contains(&self.saturation), "saturation must lie in [0, 2]");
        ensure!(self.contrast > 0.0 && self.contrast <= 2.0, "contrast must lie in (0, 2]");
        ensure!((-0.5..=0.5).contains(&self.brightness), "brightness must lie in [-0.5, 0.5]");
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, c: Rgb) -> Rgb {
        let a = self.hue_shift.to_radians();
        let (cos, sin) = (a.cos(), a.sin());
        let k = (1.0 - cos) / 3.0;
        let s = (1.0f32 / 3.0).sqrt() * sin;
        let rot = [[cos + k, k - s, k + s], [k + s, cos + k, k - s], [k - s, k + s, cos + k]];
        let mut out: Rgb = std::array::from_fn(|i| rot[i][0] * c[0] + rot[i][1] * c[1] + rot[i][2] * c[2]);
        let grey = (out[0] + out[1] + out[2]) / 3.0;
        for v in &mut out {
            *v = grey + self.saturation * (*v - grey);
            *v = 0.5 + self.contrast * (*v - 0.5) + self.brightness;
        }
        out
    }
}

/// The appearance shift that separates the target domain from the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainStyle {
    pub background: Background,
    pub colour: ColourTransform,
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        self.background.validate()?;
        self.colour.validate()
    }

    pub fn default_source() -> Self {
        Self { background: Background::default(), colour: ColourTransform::default() }
    }

    pub fn default_target() -> Self {
        Self {
            background: Background::Clutter { blobs: 6, saturation: (0.4, 1.0), value: (0.3, 1.0) },
            colour: ColourTransform { hue_shift: 40.0, saturation: 0.8, contrast: 0.8, brightness: 0.05 },
        }
    }
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self::default_source()
    }
}
