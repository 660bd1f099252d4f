//! Paired (hidden, projection, condition) samples: generation, manifests,
//! mixing, ingestion of per-condition folder layouts, and batching.
//!
//! On disk a dataset is a directory holding `manifest.json` and
//! `<condition_id>/<split>/<index>_{hidden|proj}.png16` (16-bit PNG).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nlos_tensor::{Array, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::lightsim::{self, AngleId, ConditionSpec, IlluminationKind, Occluder, SceneGeometry, SurfaceKind};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Channels of generated hidden images.
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("split must be `train` or `test`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub hidden_path: PathBuf,
    pub projection_path: PathBuf,
    pub condition_id: usize,
    pub split: Split,
}

/// Dataset index. Record paths are absolute in memory and stored relative to
/// the manifest directory when they lie beneath it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub hidden_res: (usize, usize),
    pub wall_res: (usize, usize),
    pub conditions: Vec<ConditionSpec>,
    /// Geometry shared by every condition, when known.
    #[serde(default)]
    pub geometry: Option<SceneGeometry>,
    /// Directory of cached transport matrices, when available.
    #[serde(default)]
    pub matrix_dir: Option<PathBuf>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.id != i {
                return Err(Error::Contract(format!(
                    "condition ids must be contiguous from 0; position {i} holds id {}",
                    c.id
                )));
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.condition_id >= self.conditions.len()) {
            return Err(Error::Contract(format!(
                "record {} references unknown condition {}",
                r.hidden_path.display(),
                r.condition_id
            )));
        }
        Ok(())
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Record count per condition id for one split.
    pub fn counts(&self, split: Split) -> Vec<usize> {
        let mut out = vec![0; self.conditions.len()];
        for r in self.split_records(split) {
            out[r.condition_id] += 1;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let mut stored = self.clone();
        for r in &mut stored.records {
            r.hidden_path = rel(&r.hidden_path);
            r.projection_path = rel(&r.projection_path);
        }
        stored.matrix_dir = self.matrix_dir.as_deref().map(rel);
        let mut text = serde_json::to_string_pretty(&stored)?;
        text.push('\n');
        if !base.as_os_str().is_empty() {
            fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.records {
            r.hidden_path = base.join(&r.hidden_path);
            r.projection_path = base.join(&r.projection_path);
        }
        m.matrix_dir = m.matrix_dir.map(|d| base.join(d));
        m.validate()?;
        Ok(m)
    }

    /// Accepts a manifest file or a dataset directory containing one.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }
}

/// Where hidden images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceImages {
    /// Seeded random strokes and rectangles.
    Procedural,
    /// Every `.png` / `.png16` file in a directory, in file-name order.
    Directory(PathBuf),
}

/// Number of hidden images assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.test
    }
}

/// Deterministic sub-seed from a base seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn bright_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = rng.random_range(0.25..1.0);
    }
    let k = rng.random_range(0..3);
    c[k] = rng.random_range(0.85..=1.0);
    c
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// One image of 1 to 3 shapes over a dim linear color gradient: digit-like
/// polyline strokes or filled rectangles, each in a random bright color.
pub fn procedural_image(res: (usize, usize), rng: &mut ChaCha8Rng) -> ImageGrid<f64> {
    let (h, w) = res;
    let (hf, wf) = (h as f64, w as f64);
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut img = ImageGrid::from_fn(h, w, CHANNELS, |y, x, c| {
        let t = 0.5 + 0.5 * ((y as f64 + 0.5 - hf / 2.0) / hf * dy + (x as f64 + 0.5 - wf / 2.0) / wf * dx);
        c0[c] + (c1[c] - c0[c]) * t
    });
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let color = bright_color(rng);
        if rng.random_bool(0.6) {
            let n = rng.random_range(2..=4);
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(0.1..0.9) * hf, rng.random_range(0.1..0.9) * wf))
                .collect();
            let half = rng.random_range(0.04..0.09) * hf.min(wf);
            for y in 0..h {
                for x in 0..w {
                    let p = (y as f64 + 0.5, x as f64 + 0.5);
                    if pts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half) {
                        for (c, v) in color.iter().enumerate() {
                            img.set(y, x, c, *v);
                        }
                    }
                }
            }
        } else {
            let y0 = rng.random_range(0..h - 1);
            let x0 = rng.random_range(0..w - 1);
            let y1 = rng.random_range(y0 + 1..=(y0 + h / 2).min(h));
            let x1 = rng.random_range(x0 + 1..=(x0 + w / 2).min(w));
            for y in y0..y1 {
                for x in x0..x1 {
                    for (c, v) in color.iter().enumerate() {
                        img.set(y, x, c, *v);
                    }
                }
            }
        }
    }
    img
}

pub fn procedural_images(count: usize, res: (usize, usize), seed: u64) -> Vec<ImageGrid<f64>> {
    (0..count)
        .map(|i| procedural_image(res, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0, i as u64]))))
        .collect()
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if p.is_file() && (ext == "png" || ext == "png16") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Decode every image, collecting all failures before reporting.
fn read_source_images(dir: &Path, res: (usize, usize), count: usize) -> Result<Vec<ImageGrid<f64>>> {
    let files = image_files(dir)?;
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for f in &files {
        match ImageGrid::<f64>::read_png(f).and_then(|im| im.with_channels(CHANNELS)) {
            Ok(im) => images.push(im.resized(res.0, res.1)),
            Err(e) => failures.push((f.clone(), e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::SourceImages(failures));
    }
    if images.len() < count {
        return Err(Error::Config(format!(
            "{} holds {} images, {count} requested",
            dir.display(),
            images.len()
        )));
    }
    images.truncate(count);
    Ok(images)
}

fn check_conditions(conds: &[ConditionSpec]) -> Result<()> {
    if conds.is_empty() {
        return Err(Error::Config("at least one condition is required".into()));
    }
    for (i, c) in conds.iter().enumerate() {
        if c.id != i {
            return Err(Error::Config(format!(
                "condition ids must be 0..{}; position {i} holds id {}",
                conds.len(),
                c.id
            )));
        }
    }
    Ok(())
}

/// Seeded assignment of hidden-image indices to splits.
pub fn assign_splits(counts: SplitCounts, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..counts.total()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1])));
    let mut splits = vec![Split::Test; counts.total()];
    for &i in &order[..counts.train] {
        splits[i] = Split::Train;
    }
    splits
}

/// Render every hidden image under every condition and write the dataset to
/// `root`. Transport matrices are cached under `<root>/matrices`.
pub fn generate_synthetic_dataset(
    root: &Path,
    source: &SourceImages,
    conds: &[ConditionSpec],
    geom: &SceneGeometry,
    counts: SplitCounts,
    seed: u64,
) -> Result<Manifest> {
    if counts.total() == 0 {
        return Err(Error::Config("split counts must include at least one image".into()));
    }
    check_conditions(conds)?;
    geom.validate()?;
    let hidden = match source {
        SourceImages::Procedural => procedural_images(counts.total(), geom.hidden_res, seed),
        SourceImages::Directory(dir) => read_source_images(dir, geom.hidden_res, counts.total())?,
    };
    let splits = assign_splits(counts, seed);
    let matrix_dir = root.join("matrices");
    let mut records = Vec::with_capacity(hidden.len() * conds.len());
    for cond in conds {
        let a = lightsim::cached_transport(&matrix_dir, cond, geom)?;
        for split in [Split::Train, Split::Test] {
            let dir = root.join(cond.id.to_string()).join(split.as_str());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, x) in hidden.iter().enumerate() {
            let noise_seed = derive_seed(seed, &[2, i as u64, cond.id as u64]);
            let y = lightsim::render_projection(&a, x, noise_seed)?;
            let dir = root.join(cond.id.to_string()).join(splits[i].as_str());
            let hidden_path = dir.join(format!("{i}_hidden.png16"));
            let projection_path = dir.join(format!("{i}_proj.png16"));
            x.write_png16(&hidden_path)?;
            y.write_png16(&projection_path)?;
            records.push(SampleRecord {
                hidden_path,
                projection_path,
                condition_id: cond.id,
                split: splits[i],
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        hidden_res: geom.hidden_res,
        wall_res: geom.wall_res,
        conditions: conds.to_vec(),
        geometry: Some(geom.clone()),
        matrix_dir: Some(matrix_dir),
        records,
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Concatenate manifests, merging physically identical conditions and
/// renumbering the rest contiguously in first-seen order.
pub fn mix_manifests(parts: &[Manifest]) -> Result<Manifest> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("nothing to mix".into()))?;
    for (k, p) in parts.iter().enumerate() {
        if p.hidden_res != first.hidden_res || p.wall_res != first.wall_res {
            return Err(Error::Dimension(format!(
                "part {k} has resolutions hidden {:?} wall {:?}, part 0 has {:?} {:?}",
                p.hidden_res, p.wall_res, first.hidden_res, first.wall_res
            )));
        }
    }
    let shared_geom = parts.iter().all(|p| p.geometry == first.geometry);
    let shared_matrices = parts.iter().all(|p| p.matrix_dir == first.matrix_dir);
    let mut conditions: Vec<ConditionSpec> = Vec::new();
    let mut records = Vec::new();
    for p in parts {
        let mut remap = Vec::with_capacity(p.conditions.len());
        for c in &p.conditions {
            // Conditions only coincide when their matrices would too.
            let existing = if shared_geom {
                conditions.iter().position(|e| e.same_physics(c))
            } else {
                None
            };
            let id = existing.unwrap_or_else(|| {
                conditions.push(ConditionSpec {
                    id: conditions.len(),
                    ..c.clone()
                });
                conditions.len() - 1
            });
            remap.push(id);
        }
        for r in &p.records {
            records.push(SampleRecord {
                condition_id: remap[r.condition_id],
                ..r.clone()
            });
        }
    }
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        hidden_res: first.hidden_res,
        wall_res: first.wall_res,
        conditions,
        geometry: if shared_geom { first.geometry.clone() } else { None },
        matrix_dir: if shared_geom && shared_matrices {
            first.matrix_dir.clone()
        } else {
            None
        },
        records,
    })
}

/// Best-effort condition from a folder name such as `70_1_dark_wall` or
/// `100;2;daylight;whiteboard;occ`. Unrecognised tokens are ignored and
/// missing fields take the first option of each axis. An `occ` token adds
/// the desk occluder.
pub fn parse_condition_name(id: usize, name: &str) -> ConditionSpec {
    let mut distance = 70.0;
    let mut angle = AngleId::One;
    let mut illumination = IlluminationKind::AmbientDark;
    let mut surface = SurfaceKind::Wall;
    let mut occluder = None;
    let mut seen_distance = false;
    for tok in name.split(['_', ';', '-', ' ']) {
        let t = tok.to_ascii_lowercase();
        match t.as_str() {
            "1" if seen_distance => angle = AngleId::One,
            "2" if seen_distance => angle = AngleId::Two,
            "dark" | "ambient" | "ambient_dark" | "d" => illumination = IlluminationKind::AmbientDark,
            "daylight" | "light" | "l" => illumination = IlluminationKind::Daylight,
            "wall" | "w" => surface = SurfaceKind::Wall,
            "whiteboard" | "wb" => surface = SurfaceKind::Whiteboard,
            "occ" | "occluder" => occluder = Some(Occluder::desk()),
            _ => {
                if let (false, Ok(v)) = (seen_distance, t.parse::<f64>()) {
                    if v > 0.0 {
                        distance = v;
                        seen_distance = true;
                    }
                }
            }
        }
    }
    ConditionSpec::new(id, distance, angle, illumination, surface, occluder)
}

/// Map `<root>/<condition>/<split>/{hidden,projection}/<name>` into a manifest.
/// Condition folders are labelled in name order; hidden and projection
/// files pair by file name. Images must share one resolution per role.
pub fn ingest_condition_folders(root: &Path) -> Result<Manifest> {
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("{} holds no condition folders", root.display())));
    }
    let mut conditions = Vec::new();
    let mut records = Vec::new();
    let mut hidden_res = None;
    let mut wall_res = None;
    let mut failures = Vec::new();
    let check_res = |slot: &mut Option<(usize, usize)>, path: &Path, failures: &mut Vec<(PathBuf, String)>| {
        match ImageGrid::<f64>::read_png(path) {
            Ok(im) => {
                let r = (im.height(), im.width());
                match slot {
                    None => *slot = Some(r),
                    Some(s) if *s != r => failures.push((path.to_path_buf(), format!("resolution {r:?} differs from {s:?}"))),
                    _ => {}
                }
            }
            Err(e) => failures.push((path.to_path_buf(), e.to_string())),
        }
    };
    for (id, name) in names.iter().enumerate() {
        conditions.push(parse_condition_name(id, name));
        for split in [Split::Train, Split::Test] {
            let hidden_dir = root.join(name).join(split.as_str()).join("hidden");
            let proj_dir = root.join(name).join(split.as_str()).join("projection");
            if !hidden_dir.is_dir() {
                continue;
            }
            for h in image_files(&hidden_dir)? {
                let p = proj_dir.join(h.file_name().expect("file name"));
                if !p.is_file() {
                    failures.push((h.clone(), format!("no matching projection {}", p.display())));
                    continue;
                }
                check_res(&mut hidden_res, &h, &mut failures);
                check_res(&mut wall_res, &p, &mut failures);
                records.push(SampleRecord {
                    hidden_path: h,
                    projection_path: p,
                    condition_id: id,
                    split,
                });
            }
        }
    }
    if !failures.is_empty() {
        return Err(Error::SourceImages(failures));
    }
    let (Some(hidden_res), Some(wall_res)) = (hidden_res, wall_res) else {
        return Err(Error::Config(format!("{} holds no image pairs", root.display())));
    };
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        hidden_res,
        wall_res,
        conditions,
        geometry: None,
        matrix_dir: None,
        records,
    })
}

/// Aligned stacked tensors `[B, C, H, W]` plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Scalar> {
    pub hidden: Array<T>,
    pub projection: Array<T>,
    pub condition_ids: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.condition_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.condition_ids.is_empty()
    }
}

/// One split decoded into memory.
#[derive(Clone, Debug)]
pub struct SplitData<T: Scalar> {
    pub hidden: Vec<ImageGrid<T>>,
    pub projection: Vec<ImageGrid<T>>,
    pub condition_ids: Vec<usize>,
}

impl<T: Scalar> SplitData<T> {
    pub fn load(m: &Manifest, split: Split) -> Result<Self> {
        let mut out = Self {
            hidden: Vec::new(),
            projection: Vec::new(),
            condition_ids: Vec::new(),
        };
        for r in m.split_records(split) {
            let x = ImageGrid::<T>::read_png(&r.hidden_path)?;
            let y = ImageGrid::<T>::read_png(&r.projection_path)?;
            if (x.height(), x.width()) != m.hidden_res || (y.height(), y.width()) != m.wall_res {
                return Err(Error::Dimension(format!(
                    "{} does not match manifest resolutions",
                    r.hidden_path.display()
                )));
            }
            out.hidden.push(x);
            out.projection.push(y);
            out.condition_ids.push(r.condition_id);
        }
        if out.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.condition_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.condition_ids.is_empty()
    }

    /// Seeded epoch order.
    pub fn permutation(&self, shuffle_seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        order
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let hs: Vec<&ImageGrid<T>> = indices.iter().map(|&i| &self.hidden[i]).collect();
        let ps: Vec<&ImageGrid<T>> = indices.iter().map(|&i| &self.projection[i]).collect();
        Ok(Batch {
            hidden: ImageGrid::stack(&hs)?,
            projection: ImageGrid::stack(&ps)?,
            condition_ids: indices.iter().map(|&i| self.condition_ids[i]).collect(),
        })
    }

    /// Every sample once, in seeded order, with a final short batch.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> Result<BatchIter<'_, T>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(BatchIter {
            data: self,
            order: self.permutation(shuffle_seed),
            batch_size,
            pos: 0,
        })
    }

    /// Records per condition id.
    pub fn counts(&self, n_conditions: usize) -> Vec<usize> {
        let mut out = vec![0; n_conditions];
        for &c in &self.condition_ids {
            out[c] += 1;
        }
        out
    }
}

pub struct BatchIter<'a, T: Scalar> {
    data: &'a SplitData<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.data.batch(&self.order[self.pos..end]).expect("uniform split images");
        self.pos = end;
        Some(b)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl<T: Scalar> ExactSizeIterator for BatchIter<'_, T> {}

/// Decode a split and list its batches for one epoch.
pub fn iterate_batches<T: Scalar>(m: &Manifest, split: Split, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch<T>>> {
    let data = SplitData::<T>::load(m, split)?;
    Ok(data.batches(batch_size, shuffle_seed)?.collect())
}

/// Content hash of an image's quantized 16-bit values.
pub fn image_hash<T: Scalar>(im: &ImageGrid<T>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((im.height() as u64).to_le_bytes());
    h.update((im.width() as u64).to_le_bytes());
    h.update((im.channels() as u64).to_le_bytes());
    for v in im.data() {
        h.update(((v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16).to_le_bytes());
    }
    h.finalize().into()
}

/// Hidden images of a split with duplicates (the same image under several
/// conditions) removed, in first-seen order.
pub fn unique_hidden<T: Scalar>(data: &SplitData<T>) -> Vec<ImageGrid<T>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for im in &data.hidden {
        if seen.insert(image_hash(im), ()).is_none() {
            out.push(im.clone());
        }
    }
    out
}

/// Per-condition pixelwise mean projection of a split.
pub fn mean_projections<T: Scalar>(data: &SplitData<T>, n_conditions: usize) -> Vec<Option<ImageGrid<T>>> {
    let mut sums: Vec<Option<(ImageGrid<T>, usize)>> = vec![None; n_conditions];
    for (y, &c) in data.projection.iter().zip(&data.condition_ids) {
        let slot = sums[c].get_or_insert_with(|| (ImageGrid::zeros(y.height(), y.width(), y.channels()), 0));
        for (s, v) in slot.0.data_mut().iter_mut().zip(y.data()) {
            *s += *v;
        }
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|s| s.map(|(im, n)| im.map(|v| v / T::from_usize_lossy(n))))
        .collect()
}
