//! Pose-guided synthesis: single translations and image grids.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{Dataset, Domain, PersonImage, PoseMap};
use crate::error::{ensure, Error, Result};
use crate::networks::Model;
use crate::pixels;

/// A generation route: content from `from`, rendered by the `to` generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Route {
    pub from: Domain,
    pub to: Domain,
}

impl Route {
    pub const SS: Route = Route { from: Domain::Source, to: Domain::Source };
    pub const TS: Route = Route { from: Domain::Target, to: Domain::Source };
    pub const TT: Route = Route { from: Domain::Target, to: Domain::Target };
    pub const ST: Route = Route { from: Domain::Source, to: Domain::Target };
    pub const ALL: [Route; 4] = [Route::SS, Route::TS, Route::TT, Route::ST];
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.from.letter(), self.to.letter())
    }
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s.split_once('2').ok_or_else(|| Error::invalid(format!("route {s:?} is not of the form s2t")))?;
        Ok(Route { from: a.parse()?, to: b.parse()? })
    }
}

/// `G_out(E_P(pose), E_C(image))`.
pub fn translate(model: &Model, image: &PersonImage, pose: &PoseMap, out: Domain) -> Result<PersonImage> {
    Ok(translate_batch(model, &[image], &[pose], out)?.remove(0))
}

/// Translates `images[i]` to `poses[i]`.
pub fn translate_batch(model: &Model, images: &[&PersonImage], poses: &[&PoseMap], out: Domain) -> Result<Vec<PersonImage>> {
    ensure!(images.len() == poses.len(), "{} images but {} poses", images.len(), poses.len());
    let vc = model.encode_content(images)?;
    let vp = model.encode_pose(poses)?;
    model.generate(out, &vp, &vc)
}

/// An 8-bit RGB mosaic of equally sized cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell_height: usize,
    pub cell_width: usize,
    /// Interleaved RGB, row-major over the whole mosaic.
    pub rgb: Vec<u8>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cell_height: usize, cell_width: usize) -> Self {
        let rgb = vec![0; rows * cols * cell_height * cell_width * 3];
        Self { rows, cols, cell_height, cell_width, rgb }
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell_height
    }

    pub fn width(&self) -> usize {
        self.cols * self.cell_width
    }

    /// Copies an interleaved RGB cell into position `(row, col)`.
    pub fn put(&mut self, row: usize, col: usize, cell: &[u8]) {
        let (ch, cw, w) = (self.cell_height, self.cell_width, self.width());
        assert_eq!(cell.len(), ch * cw * 3, "cell size");
        for y in 0..ch {
            let dst = ((row * ch + y) * w + col * cw) * 3;
            self.rgb[dst..dst + cw * 3].copy_from_slice(&cell[y * cw * 3..(y + 1) * cw * 3]);
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        pixels::write_png(path, self.height(), self.width(), &self.rgb)
    }
}

/// Max-projection of a pose map as a grey silhouette.
pub fn pose_silhouette(pose: &PoseMap) -> Vec<u8> {
    pose.max_projection()
        .into_iter()
        .flat_map(|v| {
            let u = (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8;
            [u, u, u]
        })
        .collect()
}

/// Lays out translations with one column per pose and one row per
/// `(route, input)`, route-major. The top row shows the poses and the left
/// column the inputs; the corner cell is black.
pub fn render_grid(model: &Model, inputs: &[&PersonImage], poses: &[&PoseMap], routes: &[Route]) -> Result<Grid> {
    ensure!(!inputs.is_empty() && !poses.is_empty() && !routes.is_empty(), "grid needs inputs, poses and routes");
    let (h, w) = (inputs[0].height(), inputs[0].width());
    for im in inputs {
        ensure!(im.height() == h && im.width() == w, "input images differ in size");
    }
    for p in poses {
        ensure!(p.height() == h && p.width() == w, "pose map size differs from the inputs");
    }
    let mut grid = Grid::new(1 + routes.len() * inputs.len(), 1 + poses.len(), h, w);
    for (j, p) in poses.iter().enumerate() {
        grid.put(0, 1 + j, &pose_silhouette(p));
    }
    let mut row = 1;
    for route in routes {
        for input in inputs {
            grid.put(row, 0, &input.to_rgb8());
            let repeated = vec![*input; poses.len()];
            let out = translate_batch(model, &repeated, poses, route.to)?;
            for (j, im) in out.iter().enumerate() {
                grid.put(row, 1 + j, &im.to_rgb8());
            }
            row += 1;
        }
    }
    Ok(grid)
}

pub fn grid_file_name(step: u64, route: Route) -> String {
    format!("grid_step{step:06}_{route}.png")
}

/// Writes one grid per route into `dir`: four inputs of distinct identities
/// from the route's source domain, rendered at six poses of that domain.
pub fn write_training_grids(dir: &Path, step: u64, model: &Model, data: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for route in Route::ALL {
        let d = data.domain(route.from);
        let groups = d.groups();
        let inputs: Vec<&PersonImage> = groups.iter().take(4).map(|(_, idx)| d.image(idx[0])).collect();
        let poses: Vec<&PoseMap> =
            groups.iter().cycle().skip(4).take(6).map(|(_, idx)| d.pose_map(idx[idx.len() - 1])).collect();
        let grid = render_grid(model, &inputs, &poses, &[route])?;
        let path = dir.join(grid_file_name(step, route));
        grid.write_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
