//! Dataset directory format.
//!
//! ```text
//! <dir>/meta.json          format tag, version, SynthSpec, identity tables
//! <dir>/keypoints.jsonl    one record per image, in dataset order
//! <dir>/source/NNNNNN.png  8-bit RGB images
//! <dir>/target/NNNNNN.png
//! ```
//!
//! A keypoints record is
//! `{"file": "source/000000.png", "domain": "source", "identity": 0, "keypoints": [[x, y, visible], ...]}`
//! with `visible` as 0 or 1. Images are stored losslessly, so a saved and
//! reloaded dataset is bit-identical to the synthesized one.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Appearance, Dataset, Domain, DomainData, Keypoint, Keypoints, PersonImage, SynthSpec, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::pixels;

pub const META_FILE: &str = "meta.json";
pub const KEYPOINTS_FILE: &str = "keypoints.jsonl";
const FORMAT: &str = "pdanet-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    spec: SynthSpec,
    height: usize,
    width: usize,
    counts: BTreeMap<Domain, usize>,
    identities: BTreeMap<Domain, Vec<u32>>,
    appearances: BTreeMap<Domain, BTreeMap<u32, Appearance>>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    file: String,
    domain: Domain,
    identity: u32,
    keypoints: Vec<(f32, f32, u8)>,
}

fn image_file(domain: Domain, i: usize) -> String {
    format!("{}/{i:06}.png", domain.name())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for d in [Domain::Source, Domain::Target] {
        let sub = dir.join(d.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let meta = Meta {
        format: FORMAT.into(),
        version: VERSION,
        spec: ds.spec.clone(),
        height: ds.height(),
        width: ds.width(),
        counts: [(Domain::Source, ds.source.len()), (Domain::Target, ds.target.len())].into(),
        identities: [(Domain::Source, ds.source.identity_list()), (Domain::Target, ds.target.identity_list())].into(),
        appearances: [
            (Domain::Source, ds.source.appearances().clone()),
            (Domain::Target, ds.target.appearances().clone()),
        ]
        .into(),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&meta_path, e))?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let kp_path = dir.join(KEYPOINTS_FILE);
    let file = fs::File::create(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
    let mut out = BufWriter::new(file);
    for data in [&ds.source, &ds.target] {
        for i in 0..data.len() {
            let file = image_file(data.domain(), i);
            let img = data.image(i);
            pixels::write_png(&dir.join(&file), img.height(), img.width(), &img.to_rgb8())?;
            let record = Record {
                file,
                domain: data.domain(),
                identity: data.identity(i),
                keypoints: data.keypoints(i).points().iter().map(|p| (p.x, p.y, p.visible as u8)).collect(),
            };
            let line = serde_json::to_string(&record).map_err(|e| Error::format(&kp_path, e))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&kp_path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(&kp_path, e))
}

/// Images, keypoints and identities of one domain while loading.
type DomainParts = (Vec<PersonImage>, Vec<Keypoints>, Vec<u32>);

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported dataset format {} v{}", meta.format, meta.version),
        ));
    }
    let kp_path = dir.join(KEYPOINTS_FILE);
    let file = fs::File::open(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
    let mut parts: BTreeMap<Domain, DomainParts> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&kp_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::format(&kp_path, format!("line {}: {e}", lineno + 1)))?;
        if rec.keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::format(&kp_path, format!("line {}: expected {NUM_KEYPOINTS} keypoints", lineno + 1)));
        }
        let points: Vec<Keypoint> =
            rec.keypoints.iter().map(|&(x, y, v)| Keypoint { x, y, visible: v != 0 }).collect();
        let kp = Keypoints::new(&points, meta.height, meta.width)
            .map_err(|e| Error::format(&kp_path, format!("line {}: {e}", lineno + 1)))?;
        let img_path = dir.join(&rec.file);
        let (h, w, rgb) = pixels::read_png(&img_path)?;
        if (h, w) != (meta.height, meta.width) {
            return Err(Error::format(&img_path, format!("image is {h}x{w}, dataset is {}x{}", meta.height, meta.width)));
        }
        let img = PersonImage::from_rgb8(h, w, &rgb).map_err(|e| Error::format(&img_path, e))?;
        let entry = parts.entry(rec.domain).or_default();
        entry.0.push(img);
        entry.1.push(kp);
        entry.2.push(rec.identity);
    }
    let mut take = |d: Domain| -> Result<DomainData> {
        let (images, kps, ids) = parts.remove(&d).unwrap_or_default();
        let expected = meta.counts.get(&d).copied().unwrap_or(0);
        if images.len() != expected {
            return Err(Error::format(&kp_path, format!("{d}: expected {expected} images, found {}", images.len())));
        }
        let apps = meta.appearances.get(&d).cloned().unwrap_or_default();
        DomainData::new(d, images, kps, ids, apps, meta.spec.sigma).map_err(|e| Error::format(&kp_path, e))
    };
    let source = take(Domain::Source)?;
    let target = take(Domain::Target)?;
    Dataset::new(meta.spec, source, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synthesize_dataset;

    #[test]
    fn save_load_round_trip() {
        let spec = SynthSpec { identities: 3, images_per_identity: 2, seed: 4, ..SynthSpec::default() };
        let ds = synthesize_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.spec, ds.spec);
        for (a, b) in [(&ds.source, &back.source), (&ds.target, &back.target)] {
            assert_eq!(a.images(), b.images());
            assert_eq!(a.identities(), b.identities());
            for i in 0..a.len() {
                assert_eq!(a.keypoints(i), b.keypoints(i));
                assert_eq!(a.pose_map(i), b.pose_map(i));
            }
            assert_eq!(a.appearances(), b.appearances());
        }
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = load_dataset(Path::new("/nonexistent/pdanet-data")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
