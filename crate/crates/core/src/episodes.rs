//! Class pools, few-shot episodes and task sequences.
//!
//! A [`ClassPool`] holds labelled images grouped by class. Episodes are
//! K-way N-shot problems whose labels are a fresh random permutation of the
//! chosen classes; a [`TaskSequence`] strings T of them together under one of
//! three class-selection regimes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// A single image, `H*W*C` values in row-major HWC order.
pub type Image = Arc<[f32]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub class_id: String,
    pub samples: Vec<Image>,
}

/// Immutable collection of classes sharing one image shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPool {
    pub domain_id: String,
    pub shape: ImageShape,
    pub classes: Vec<ClassRecord>,
}

impl ClassPool {
    pub fn new(domain_id: impl Into<String>, shape: ImageShape, classes: Vec<ClassRecord>) -> Result<Self> {
        let pool = Self {
            domain_id: domain_id.into(),
            shape,
            classes,
        };
        pool.validate()?;
        Ok(pool)
    }

    fn validate(&self) -> Result<()> {
        if self.shape.is_empty() {
            return Err(invalid("image shape has a zero dimension"));
        }
        for c in &self.classes {
            if let Some(bad) = c.samples.iter().find(|s| s.len() != self.shape.len()) {
                return Err(Error::Shape(format!(
                    "class {} has an image of {} values, expected {}",
                    c.class_id,
                    bad.len(),
                    self.shape.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn min_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).min().unwrap_or(0)
    }

    /// Class-disjoint split into (train, test) pools. At least one class
    /// lands on each side whenever the pool has two or more classes.
    pub fn split_classes(&self, train_fraction: f64, seed: u64) -> Result<(ClassPool, ClassPool)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(invalid(format!("train fraction {train_fraction} outside [0,1]")));
        }
        let n = self.classes.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_train = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut test: Vec<usize> = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        let pick = |idx: &[usize]| ClassPool {
            domain_id: self.domain_id.clone(),
            shape: self.shape,
            classes: idx.iter().map(|&i| self.classes[i].clone()).collect(),
        };
        Ok((pick(&train), pick(&test)))
    }

    /// Per-pool standardization: subtracts the pool mean and divides by the
    /// pool standard deviation. The result is no longer confined to [0,1].
    pub fn standardized(&self) -> ClassPool {
        let (mut sum, mut sq, mut count) = (0.0f64, 0.0f64, 0usize);
        for c in &self.classes {
            for s in &c.samples {
                for &v in s.iter() {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
                count += s.len();
            }
        }
        if count == 0 {
            return self.clone();
        }
        let mean = sum / count as f64;
        let std = (sq / count as f64 - mean * mean).max(0.0).sqrt().max(1e-8);
        let classes = self
            .classes
            .iter()
            .map(|c| ClassRecord {
                class_id: c.class_id.clone(),
                samples: c
                    .samples
                    .iter()
                    .map(|s| s.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
                    .collect(),
            })
            .collect();
        ClassPool {
            domain_id: self.domain_id.clone(),
            shape: self.shape,
            classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolFormat {
    /// `<root>/<class_id>/<sample>.png`
    Png,
    /// `<root>/<class_id>.npy`, one `[n,H,W,C]` array per class.
    Npy,
}

/// Where and how to read a pool from disk.
#[derive(Clone, Debug)]
pub struct PoolSource {
    pub root: PathBuf,
    pub format: PoolFormat,
    /// Resize PNG images to `(height, width)` when set.
    pub resize: Option<(usize, usize)>,
    /// Minimum number of samples a class must have to be accepted.
    pub min_samples_per_class: usize,
}

impl PoolSource {
    pub fn new(root: impl Into<PathBuf>, format: PoolFormat) -> Self {
        Self {
            root: root.into(),
            format,
            resize: None,
            min_samples_per_class: 1,
        }
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads a pool from disk. Classes are ordered lexicographically by id and
/// image values are scaled to [0,1].
pub fn load_pool(source: &PoolSource) -> Result<ClassPool> {
    let root = &source.root;
    if !root.is_dir() {
        return Err(load_err(root, "directory does not exist"));
    }
    let domain_id = root
        .file_name()
        .map_or_else(|| root.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut classes = match source.format {
        PoolFormat::Png => load_png_classes(source)?,
        PoolFormat::Npy => load_npy_classes(root)?,
    };
    classes.sort_by(|a, b| a.0.class_id.cmp(&b.0.class_id));
    if classes.is_empty() {
        return Err(load_err(root, "no classes found"));
    }
    let shape = classes[0].1;
    for (c, s) in &classes {
        if *s != shape {
            return Err(load_err(
                root,
                format!("class {} has images of shape {:?}, expected {:?}", c.class_id, s, shape),
            ));
        }
        if c.samples.len() < source.min_samples_per_class.max(1) {
            return Err(load_err(
                root,
                format!(
                    "class {} has {} samples, need at least {}",
                    c.class_id,
                    c.samples.len(),
                    source.min_samples_per_class.max(1)
                ),
            ));
        }
    }
    ClassPool::new(domain_id, shape, classes.into_iter().map(|(c, _)| c).collect())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| load_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn load_png_classes(source: &PoolSource) -> Result<Vec<(ClassRecord, ImageShape)>> {
    let mut classes = Vec::new();
    for dir in sorted_entries(&source.root)?.into_iter().filter(|p| p.is_dir()) {
        let class_id = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut samples = Vec::new();
        let mut shape: Option<ImageShape> = None;
        for file in sorted_entries(&dir)? {
            if file
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
                != Some("png")
            {
                continue;
            }
            let img = image::open(&file).map_err(|e| load_err(&file, e.to_string()))?;
            let img = match source.resize {
                Some((h, w)) => img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle),
                None => img,
            };
            let gray = !img.color().has_color();
            let (values, s) = if gray {
                let l = img.to_luma32f();
                let s = ImageShape::new(l.height() as usize, l.width() as usize, 1);
                (l.into_raw(), s)
            } else {
                let rgb = img.to_rgb32f();
                let s = ImageShape::new(rgb.height() as usize, rgb.width() as usize, 3);
                (rgb.into_raw(), s)
            };
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(load_err(
                        &file,
                        format!("shape {s:?} differs from {prev:?} in its class"),
                    ));
                }
                _ => {}
            }
            samples.push(Arc::from(values));
        }
        let shape = shape.unwrap_or(ImageShape::new(0, 0, 0));
        classes.push((ClassRecord { class_id, samples }, shape));
    }
    Ok(classes)
}

fn load_npy_classes(root: &Path) -> Result<Vec<(ClassRecord, ImageShape)>> {
    let mut classes = Vec::new();
    for file in sorted_entries(root)? {
        if file.extension().and_then(|e| e.to_str()) != Some("npy") {
            continue;
        }
        let class_id = file.file_stem().unwrap().to_string_lossy().into_owned();
        let bytes = fs::read(&file)?;
        let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| load_err(&file, e.to_string()))?;
        let dims: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
        if dims.len() != 4 {
            return Err(load_err(&file, format!("expected [n,H,W,C] array, got shape {dims:?}")));
        }
        let descr = npy.dtype().descr();
        let values: Vec<f32> = if descr.ends_with("u1") {
            npy.into_vec::<u8>()
                .map_err(|e| load_err(&file, e.to_string()))?
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect()
        } else if descr.ends_with("f4") {
            npy.into_vec::<f32>().map_err(|e| load_err(&file, e.to_string()))?
        } else if descr.ends_with("f8") {
            npy.into_vec::<f64>()
                .map_err(|e| load_err(&file, e.to_string()))?
                .into_iter()
                .map(|v| v as f32)
                .collect()
        } else {
            return Err(load_err(&file, format!("unsupported dtype {descr}")));
        };
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(load_err(&file, "float images must lie in [0,1]"));
        }
        let shape = ImageShape::new(dims[1], dims[2], dims[3]);
        let samples = values.chunks(shape.len().max(1)).map(Arc::from).collect();
        classes.push((ClassRecord { class_id, samples }, shape));
    }
    Ok(classes)
}

/// Knobs of the synthetic pattern generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub shape: ImageShape,
    pub seed: u64,
    /// Standard deviation of additive per-pixel noise.
    pub noise: f32,
    /// Maximum circular shift (pixels) applied per sample.
    pub max_shift: usize,
    /// Selects the pattern family; different domains look different.
    pub domain: usize,
}

impl SyntheticParams {
    pub fn new(num_classes: usize, samples_per_class: usize, shape: ImageShape, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            shape,
            seed,
            noise: 0.15,
            max_shift: 1,
            domain: 0,
        }
    }
}

/// Deterministic pool of separable synthetic classes with default difficulty.
pub fn make_synthetic_pool(
    num_classes: usize,
    samples_per_class: usize,
    shape: ImageShape,
    seed: u64,
) -> Result<ClassPool> {
    make_synthetic_pool_with(&SyntheticParams::new(num_classes, samples_per_class, shape, seed))
}

/// Builds a pool whose classes are smooth templates (Gaussian blobs plus an
/// oriented grating, mixed per domain) perturbed per sample by a random
/// circular shift, a contrast jitter and additive Gaussian noise.
pub fn make_synthetic_pool_with(p: &SyntheticParams) -> Result<ClassPool> {
    if p.num_classes < 1 {
        return Err(invalid("num_classes must be >= 1"));
    }
    if p.samples_per_class < 2 {
        return Err(invalid("samples_per_class must be >= 2"));
    }
    if p.shape.is_empty() {
        return Err(invalid("image shape has a zero dimension"));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(invalid("noise must be a finite non-negative number"));
    }
    let ImageShape {
        height: h,
        width: w,
        channels: ch,
    } = p.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ (p.domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    // Relative weight of blobs vs. grating, by domain.
    let (blob_w, grating_w) = match p.domain % 3 {
        0 => (1.0, 0.6),
        1 => (0.3, 1.0),
        _ => (1.0, 0.0),
    };
    let noise = Normal::new(0.0f32, p.noise.max(f32::MIN_POSITIVE)).unwrap();
    let mut classes = Vec::with_capacity(p.num_classes);
    for c in 0..p.num_classes {
        let mut template = vec![0.0f32; p.shape.len()];
        for channel in 0..ch {
            let n_blobs = rng.random_range(2..=3);
            let blobs: Vec<(f32, f32, f32, f32)> = (0..n_blobs)
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f32),
                        rng.random_range(0.0..w as f32),
                        rng.random_range(0.8..(h.min(w) as f32 / 3.0).max(1.0)),
                        if rng.random_bool(0.7) { 1.0 } else { -0.6 },
                    )
                })
                .collect();
            let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let freq: f32 = rng.random_range(0.6..2.2) * std::f32::consts::TAU / h.max(w) as f32 * 2.0;
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for &(cy, cx, s, a) in &blobs {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        v += blob_w * a * (-d2 / (2.0 * s * s)).exp();
                    }
                    let u = x as f32 * theta.cos() + y as f32 * theta.sin();
                    v += grating_w * 0.5 * (freq * u + phase).sin();
                    template[(y * w + x) * ch + channel] = v;
                }
            }
        }
        let (lo, hi) = template
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        let span = (hi - lo).max(1e-6);
        template.iter_mut().for_each(|v| *v = (*v - lo) / span);

        let shift = p.max_shift as i64;
        let samples = (0..p.samples_per_class)
            .map(|_| {
                let dy = rng.random_range(-shift..=shift);
                let dx = rng.random_range(-shift..=shift);
                let contrast: f32 = rng.random_range(0.8..1.2);
                let mut img = vec![0.0f32; p.shape.len()];
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as i64 + dy).rem_euclid(h as i64) as usize;
                        let sx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                        for k in 0..ch {
                            let base = template[(sy * w + sx) * ch + k];
                            let n = if p.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            img[(y * w + x) * ch + k] = (0.5 + contrast * (base - 0.5) + n).clamp(0.0, 1.0);
                        }
                    }
                }
                Arc::from(img)
            })
            .collect();
        classes.push(ClassRecord {
            class_id: format!("d{}_c{:04}", p.domain, c),
            samples,
        });
    }
    ClassPool::new(format!("synthetic{}", p.domain), p.shape, classes)
}

/// One pool per domain, each with its own pattern family and seed stream.
pub fn make_multi_domain_pools(base: &SyntheticParams, num_domains: usize) -> Result<Vec<ClassPool>> {
    (0..num_domains)
        .map(|d| {
            let mut p = base.clone();
            p.domain = d;
            p.seed = base.seed.wrapping_add(d as u64 * 7919);
            make_synthetic_pool_with(&p)
        })
        .collect()
}

/// A labelled sample in an episode. `class_index` and `sample_index` locate
/// it in the source pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub class_index: usize,
    pub sample_index: usize,
}

/// One K-way N-shot few-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    /// `class_map[label]` is the pool class id behind that label.
    pub class_map: Vec<String>,
    pub domain_id: String,
    pub shape: ImageShape,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SameClasses,
    SingleDomain,
    MultiDomain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Episode>,
    pub regime: Regime,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Stacks sample images into a `[B,H,W,C]` tensor.
pub fn images_tensor(samples: &[Sample], shape: ImageShape) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * shape.len());
    for s in samples {
        data.extend(s.image.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![samples.len(), shape.height, shape.width, shape.channels], data)
}

fn check_way(pool: &ClassPool, way: usize, need: usize) -> Result<()> {
    if way == 0 || need == 0 {
        return Err(Error::Sampling("way and shots must be positive".into()));
    }
    if pool.num_classes() < way {
        return Err(Error::Sampling(format!(
            "pool {} has {} classes, {}-way episode requested",
            pool.domain_id,
            pool.num_classes(),
            way
        )));
    }
    Ok(())
}

/// Samples a K-way episode with `shots` support and `queries` query samples
/// per label. Classes are drawn without replacement and labels are a fresh
/// random permutation.
pub fn sample_episode(
    pool: &ClassPool,
    way: usize,
    shots: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    check_way(pool, way, shots)?;
    let classes = draw_classes(pool, way, shots + queries, rng)?;
    let mut support = Vec::with_capacity(way * shots);
    let mut query = Vec::with_capacity(way * queries);
    for (label, &ci) in classes.iter().enumerate() {
        let class = &pool.classes[ci];
        let picks = index::sample(rng, class.samples.len(), shots + queries).into_vec();
        for (j, &si) in picks.iter().enumerate() {
            let s = Sample {
                image: class.samples[si].clone(),
                label,
                class_index: ci,
                sample_index: si,
            };
            if j < shots {
                support.push(s);
            } else {
                query.push(s);
            }
        }
    }
    support.sort_by_key(|s| s.label);
    query.sort_by_key(|s| s.label);
    Ok(Episode {
        support,
        query,
        class_map: classes.iter().map(|&c| pool.classes[c].class_id.clone()).collect(),
        domain_id: pool.domain_id.clone(),
        shape: pool.shape,
    })
}

/// Random ordered selection of `way` classes that each hold `need` samples;
/// position in the result is the label.
fn draw_classes(pool: &ClassPool, way: usize, need: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..pool.num_classes())
        .filter(|&c| pool.classes[c].samples.len() >= need)
        .collect();
    if eligible.len() < way {
        return Err(Error::Sampling(format!(
            "only {} classes of pool {} have >= {} samples, {}-way episode requested",
            eligible.len(),
            pool.domain_id,
            need,
            way
        )));
    }
    let mut chosen: Vec<usize> = index::sample(rng, eligible.len(), way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.shuffle(rng);
    Ok(chosen)
}

/// Samples `tasks` episodes under `regime`.
pub fn sample_task_sequence(
    pools: &[ClassPool],
    tasks: usize,
    regime: Regime,
    way: usize,
    shots: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TaskSequence> {
    if pools.is_empty() {
        return Err(Error::Sampling("no pools given".into()));
    }
    if tasks == 0 {
        return Err(Error::Sampling("a task sequence needs at least one task".into()));
    }
    let episodes = match regime {
        Regime::SameClasses => {
            let pool = &pools[rng.random_range(0..pools.len())];
            same_class_episodes(pool, tasks, way, shots, queries, rng)?
        }
        Regime::SingleDomain => {
            let pool = &pools[rng.random_range(0..pools.len())];
            (0..tasks)
                .map(|_| sample_episode(pool, way, shots, queries, rng))
                .collect::<Result<Vec<_>>>()?
        }
        Regime::MultiDomain => {
            if pools.len() < 2 {
                log::warn!("multi_domain regime with a single pool behaves like single_domain");
            }
            (0..tasks)
                .map(|_| {
                    let pool = &pools[rng.random_range(0..pools.len())];
                    sample_episode(pool, way, shots, queries, rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(TaskSequence {
        tasks: episodes,
        regime,
    })
}

/// T batches over one class set sharing a class map. Support samples are
/// disjoint across batches when every class has `tasks*shots + queries`
/// samples; otherwise each batch is drawn independently.
fn same_class_episodes(
    pool: &ClassPool,
    tasks: usize,
    way: usize,
    shots: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    check_way(pool, way, shots)?;
    let disjoint_need = tasks * shots + queries;
    let disjoint = pool.classes.iter().filter(|c| c.samples.len() >= disjoint_need).count() >= way;
    let need = if disjoint { disjoint_need } else { shots + queries };
    if !disjoint {
        log::warn!(
            "pool {} cannot provide {} disjoint samples per class; support batches may repeat samples",
            pool.domain_id,
            disjoint_need
        );
    }
    let classes = draw_classes(pool, way, need, rng)?;
    // Per class: a permutation whose head feeds the supports.
    let perms: Vec<Vec<usize>> = classes
        .iter()
        .map(|&ci| {
            let n = pool.classes[ci].samples.len();
            index::sample(rng, n, n).into_vec()
        })
        .collect();
    let class_map: Vec<String> = classes.iter().map(|&c| pool.classes[c].class_id.clone()).collect();
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let mut support = Vec::new();
        let mut query = Vec::new();
        for (label, &ci) in classes.iter().enumerate() {
            let class = &pool.classes[ci];
            let mk = |si: usize| Sample {
                image: class.samples[si].clone(),
                label,
                class_index: ci,
                sample_index: si,
            };
            if disjoint {
                let perm = &perms[label];
                support.extend(perm[t * shots..(t + 1) * shots].iter().map(|&si| mk(si)));
                let rest = &perm[tasks * shots..];
                let qi = index::sample(rng, rest.len(), queries);
                query.extend(qi.into_iter().map(|i| mk(rest[i])));
            } else {
                let picks = index::sample(rng, class.samples.len(), shots + queries).into_vec();
                support.extend(picks[..shots].iter().map(|&si| mk(si)));
                query.extend(picks[shots..].iter().map(|&si| mk(si)));
            }
        }
        out.push(Episode {
            support,
            query,
            class_map: class_map.clone(),
            domain_id: pool.domain_id.clone(),
            shape: pool.shape,
        });
    }
    Ok(out)
}

/// Relabels every task with its own random permutation of `0..K`, so the
/// same class may carry different labels in different tasks.
pub fn shuffle_labels(seq: &mut TaskSequence, rng: &mut ChaCha8Rng) {
    for ep in &mut seq.tasks {
        let mut perm: Vec<usize> = (0..ep.way()).collect();
        perm.shuffle(rng);
        let mut class_map = ep.class_map.clone();
        for (old, &new) in perm.iter().enumerate() {
            class_map[new] = ep.class_map[old].clone();
        }
        ep.class_map = class_map;
        for s in ep.support.iter_mut().chain(ep.query.iter_mut()) {
            s.label = perm[s.label];
        }
        ep.support.sort_by_key(|s| s.label);
        ep.query.sort_by_key(|s| s.label);
    }
}

/// Resamples the support and query samples of an episode's classes, keeping
/// the classes and their labels fixed.
pub fn resample_episode(
    pool: &ClassPool,
    episode: &Episode,
    shots: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (label, class_id) in episode.class_map.iter().enumerate() {
        let ci = pool
            .classes
            .iter()
            .position(|c| &c.class_id == class_id)
            .ok_or_else(|| Error::Sampling(format!("class {class_id} not in pool {}", pool.domain_id)))?;
        let class = &pool.classes[ci];
        if class.samples.len() < shots + queries {
            return Err(Error::Sampling(format!("class {class_id} has too few samples")));
        }
        let picks = index::sample(rng, class.samples.len(), shots + queries).into_vec();
        for (j, &si) in picks.iter().enumerate() {
            let s = Sample {
                image: class.samples[si].clone(),
                label,
                class_index: ci,
                sample_index: si,
            };
            if j < shots {
                support.push(s);
            } else {
                query.push(s);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        class_map: episode.class_map.clone(),
        domain_id: episode.domain_id.clone(),
        shape: episode.shape,
    })
}
