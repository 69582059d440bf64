//! On-disk datasets: images, masks, GT maps and a CSV manifest per split.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::{forge, generate_frame, make_mask, ManipulationKind, ManipulationRanges};
use crate::checkpoint;
use crate::dssim::{gt_map_for_sample, DssimParams};
use crate::error::{Error, Result};
use crate::imageio::{quantize, read_pgm, read_ppm, write_pgm, write_ppm};
use crate::params::ParamSet;
use crate::rng::seed_u64;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 8] = ["id", "group_id", "label", "kind", "real_path", "fake_path", "mask_path", "map_path"];
pub const TRAIN_MANIFEST: &str = "train_manifest.csv";
pub const TEST_MANIFEST: &str = "test_manifest.csv";
/// Tensor name of the lossless map inside a map file.
pub const MAP_TENSOR: &str = "map";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index used by the classifiers (`fake` is the positive class).
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(Error::Format(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub size: usize,
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
    /// Consecutive samples sharing a scene and a group id.
    pub group_size: usize,
    pub train_kinds: Vec<ManipulationKind>,
    pub test_kinds: Vec<ManipulationKind>,
    pub ranges: ManipulationRanges,
    pub dssim: DssimParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        use ManipulationKind::*;
        Self {
            size: 32,
            train_real: 400,
            train_fake: 400,
            test_real: 100,
            test_fake: 100,
            group_size: 4,
            train_kinds: vec![PhotometricShift, LocalBlur, WarpBlend],
            test_kinds: vec![PhotometricShift, LocalBlur, PatchSwap, WarpBlend],
            ranges: ManipulationRanges::default(),
            dssim: DssimParams::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.dssim.validate()?;
        if self.size < self.dssim.window {
            return Err(Error::InvalidParam(format!("image size {} is smaller than the DSSIM window", self.size)));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidParam("group size must be positive".into()));
        }
        if self.train_fake > 0 && self.train_kinds.is_empty() {
            return Err(Error::InvalidParam("train split has fakes but no manipulation kinds".into()));
        }
        if self.test_fake > 0 && self.test_kinds.is_empty() {
            return Err(Error::InvalidParam("test split has fakes but no manipulation kinds".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    pub group_id: usize,
    pub label: Label,
    pub kind: Option<ManipulationKind>,
    pub real_path: String,
    pub fake_path: Option<String>,
    pub mask_path: Option<String>,
    pub map_path: String,
}

/// A loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub group_id: usize,
    pub label: Label,
    pub kind: Option<ManipulationKind>,
    pub real: Tensor<f32>,
    pub fake: Option<Tensor<f32>>,
    pub mask: Option<Tensor<f32>>,
    /// Normalized GT DSSIM map, `H×W` in `[0, 1]`.
    pub gt_map: Tensor<f32>,
}

impl Sample {
    /// The image the classifiers see.
    pub fn input(&self) -> &Tensor<f32> {
        self.fake.as_ref().unwrap_or(&self.real)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// One planned sample: group, label, kind, source clip and frame within the clip.
type Planned = (usize, Label, Option<ManipulationKind>, usize, usize);

/// Sample plan for one split, in order. Label-homogeneous groups alternate
/// real/fake and fake groups cycle through the kinds. The k-th fake group is
/// forged frame by frame from the k-th real group (as fake clips derive from
/// real source clips), so image content carries no label information beyond
/// the manipulation itself.
fn plan_split(n_real: usize, n_fake: usize, gs: usize, kinds: &[ManipulationKind]) -> Vec<Planned> {
    let mut plan = Vec::with_capacity(n_real + n_fake);
    let (mut left_real, mut left_fake) = (n_real, n_fake);
    let (mut group, mut real_groups, mut fake_groups) = (0, 0, 0);
    let n_real_groups = n_real.div_ceil(gs);
    while left_real + left_fake > 0 {
        let want_fake = if left_real == 0 { true } else if left_fake == 0 { false } else { group % 2 == 1 };
        if want_fake {
            let k = kinds[fake_groups % kinds.len()];
            let source = if n_real_groups == 0 { fake_groups } else { fake_groups % n_real_groups };
            fake_groups += 1;
            let n = gs.min(left_fake);
            left_fake -= n;
            plan.extend((0..n).map(|j| (group, Label::Fake, Some(k), source, j)));
        } else {
            let source = real_groups;
            real_groups += 1;
            let n = gs.min(left_real);
            left_real -= n;
            plan.extend((0..n).map(|j| (group, Label::Real, None, source, j)));
        }
        group += 1;
    }
    plan
}

fn synthesize(
    cfg: &DataConfig,
    seed: u64,
    split: Split,
    id_offset: usize,
    group_offset: usize,
) -> Result<Vec<Sample>> {
    let (n_real, n_fake, kinds) = match split {
        Split::Train => (cfg.train_real, cfg.train_fake, &cfg.train_kinds),
        Split::Test => (cfg.test_real, cfg.test_fake, &cfg.test_kinds),
    };
    let plan = plan_split(n_real, n_fake, cfg.group_size, kinds);
    plan.into_par_iter()
        .enumerate()
        .map(|(i, (g, label, kind, source, pos))| {
            let (id, group_id, clip) = (id_offset + i, group_offset + g, group_offset + source);
            let scene = seed_u64(seed, "data/scene", clip as u64);
            let frame = seed_u64(seed, "data/frame", (clip * cfg.group_size + pos) as u64);
            let real = generate_frame(scene, frame, cfg.size);
            let (fake, mask) = match kind {
                None => (None, None),
                Some(k) => {
                    let mask = quantize(&make_mask(seed_u64(seed, "data/mask", id as u64), cfg.size, cfg.size));
                    let fake = forge(&real, k, &mask, seed_u64(seed, "data/forge", id as u64), &cfg.ranges)?;
                    (Some(fake), Some(mask))
                }
            };
            let gt = gt_map_for_sample(&real, fake.as_ref(), &cfg.dssim)?.values;
            Ok(Sample { id, group_id, label, kind, real, fake, mask, gt_map: gt })
        })
        .collect()
}

/// Generate both splits in memory: `(train, test)`. Ids and group ids are unique across splits.
pub fn generate_samples(cfg: &DataConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let train = synthesize(cfg, seed, Split::Train, 0, 0)?;
    let next_group = train.last().map_or(0, |s| s.group_id + 1);
    let test = synthesize(cfg, seed, Split::Test, train.len(), next_group)?;
    Ok((train, test))
}

pub fn save_map(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let mut p = ParamSet::new();
    p.insert(MAP_TENSOR, map.clone());
    checkpoint::save(path, &p)
}

pub fn load_map(path: &Path) -> Result<Tensor<f32>> {
    let mut p = checkpoint::load::<f32>(path)?;
    p.remove(MAP_TENSOR).ok_or_else(|| Error::MissingParam(MAP_TENSOR.into()))
}

fn write_samples(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestRow>> {
    samples
        .iter()
        .map(|s| {
            let stem = format!("images/{:05}", s.id);
            let real_path = format!("{stem}_real.ppm");
            write_ppm(&dir.join(&real_path), &s.real)?;
            let fake_path = match &s.fake {
                Some(f) => {
                    let p = format!("{stem}_fake.ppm");
                    write_ppm(&dir.join(&p), f)?;
                    Some(p)
                }
                None => None,
            };
            let mask_path = match &s.mask {
                Some(m) => {
                    let p = format!("{stem}_mask.pgm");
                    write_pgm(&dir.join(&p), m)?;
                    Some(p)
                }
                None => None,
            };
            let map_path = format!("{stem}_map.dfft");
            save_map(&dir.join(&map_path), &s.gt_map)?;
            write_pgm(&dir.join(format!("{stem}_map.pgm")), &s.gt_map)?;
            Ok(ManifestRow {
                id: s.id,
                group_id: s.group_id,
                label: s.label,
                kind: s.kind,
                real_path,
                fake_path,
                mask_path,
                map_path,
            })
        })
        .collect()
}

/// Synthesize both splits into `out`, returning the manifest paths.
pub fn build_dataset(cfg: &DataConfig, seed: u64, out: &Path) -> Result<DatasetFiles> {
    let (train, test) = generate_samples(cfg, seed)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let files = DatasetFiles { train_manifest: out.join(TRAIN_MANIFEST), test_manifest: out.join(TEST_MANIFEST) };
    write_manifest(&files.train_manifest, &write_samples(out, &train)?)?;
    write_manifest(&files.test_manifest, &write_samples(out, &test)?)?;
    Ok(files)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        let kind = r.kind.map_or("none", |k| k.name());
        w.write_record([
            r.id.to_string().as_str(),
            &r.group_id.to_string(),
            &r.label.to_string(),
            kind,
            &r.real_path,
            r.fake_path.as_deref().unwrap_or(""),
            r.mask_path.as_deref().unwrap_or(""),
            &r.map_path,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Format(format!("{}: unexpected manifest header", path.display())));
    }
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
    r.records()
        .map(|rec| {
            let rec = rec?;
            let kind = match &rec[3] {
                "none" => None,
                k => Some(k.parse()?),
            };
            let row = ManifestRow {
                id: rec[0].parse().map_err(|_| bad("id"))?,
                group_id: rec[1].parse().map_err(|_| bad("group_id"))?,
                label: rec[2].parse()?,
                kind,
                real_path: rec[4].to_string(),
                fake_path: opt(&rec[5]),
                mask_path: opt(&rec[6]),
                map_path: rec[7].to_string(),
            };
            let fake = row.label == Label::Fake;
            if fake != row.fake_path.is_some() || fake != row.mask_path.is_some() || fake != row.kind.is_some() {
                return Err(Error::Format(format!("{}: row {} mixes real and fake fields", path.display(), row.id)));
            }
            Ok(row)
        })
        .collect()
}

/// Load every sample listed in a manifest.
pub fn load_samples(manifest: &Path) -> Result<Vec<Sample>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    rows.into_par_iter()
        .map(|r| {
            Ok(Sample {
                id: r.id,
                group_id: r.group_id,
                label: r.label,
                kind: r.kind,
                real: read_ppm(&dir.join(&r.real_path))?,
                fake: r.fake_path.map(|p| read_ppm(&dir.join(p))).transpose()?,
                mask: r.mask_path.map(|p| read_pgm(&dir.join(p))).transpose()?,
                gt_map: load_map(&dir.join(&r.map_path))?,
            })
        })
        .collect()
}
