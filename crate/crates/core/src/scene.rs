//! Synthetic BEV scenes: seeded point clouds with labeled rectangular
//! objects, their occupancy rasterization, Gaussian center heatmaps, and a
//! binary scene-set file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, LoadError, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// BEV input channels: occupancy, mean intensity, normalized count.
pub const BEV_CHANNELS: usize = 3;

/// Per-class shape and reflectance templates, in scene units.
#[derive(Clone, Copy, Debug)]
struct ClassTemplate {
    width: (f64, f64),
    length: (f64, f64),
    intensity: f64,
    height: f64,
}

const CLASS_TEMPLATES: [ClassTemplate; 4] = [
    // car-like
    ClassTemplate { width: (2.4, 3.2), length: (4.8, 6.4), intensity: 0.7, height: 1.5 },
    // pedestrian-like
    ClassTemplate { width: (1.2, 1.8), length: (1.2, 1.8), intensity: 0.35, height: 1.7 },
    // cyclist-like
    ClassTemplate { width: (1.2, 1.8), length: (2.8, 3.6), intensity: 0.5, height: 1.2 },
    // barrier-like
    ClassTemplate { width: (0.8, 1.2), length: (3.2, 4.8), intensity: 0.9, height: 1.0 },
];

pub const MAX_CLASSES: usize = CLASS_TEMPLATES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Side length of the square scene, in scene units.
    pub extent: f64,
    /// Scene units per BEV cell.
    pub resolution: f64,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Unlabeled dense blobs that look object-like.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Expected points per unit area inside an object footprint.
    pub object_density: f64,
    /// Expected background points per unit area.
    pub clutter_density: f64,
    /// Std-dev of per-point intensity noise.
    pub intensity_noise: f64,
    /// Points per cell that map to a count-channel value of 1.
    pub cell_capacity: f64,
    /// Placement attempts per object before giving up.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 51.2,
            resolution: 0.8,
            num_classes: 3,
            min_objects: 2,
            max_objects: 8,
            min_distractors: 0,
            max_distractors: 3,
            object_density: 6.0,
            clutter_density: 0.05,
            intensity_noise: 0.1,
            cell_capacity: 8.0,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn grid_size(&self) -> usize {
        (self.extent / self.resolution).round() as usize
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.extent > 0.0) || !(self.resolution > 0.0) {
            errs.push("scene.extent and scene.resolution must be positive".into());
        } else {
            let cells = self.extent / self.resolution;
            if (cells - cells.round()).abs() > 1e-9 {
                errs.push(format!("scene.resolution {} does not divide scene.extent {}", self.resolution, self.extent));
            }
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            errs.push(format!("scene.num_classes must be in 1..={MAX_CLASSES}"));
        }
        if self.min_objects > self.max_objects {
            errs.push("scene.min_objects exceeds scene.max_objects".into());
        }
        if self.min_distractors > self.max_distractors {
            errs.push("scene.min_distractors exceeds scene.max_distractors".into());
        }
        if self.object_density < 0.0 || self.clutter_density < 0.0 {
            errs.push("point densities must be non-negative".into());
        }
        if !(self.cell_capacity > 0.0) {
            errs.push("scene.cell_capacity must be positive".into());
        }
        errs
    }
}

/// One point: `(x, y, z, intensity)` in scene units.
pub type Point = [f32; 4];

/// Ground-truth object in BEV grid coordinates (cell `(i, j)` is centered at
/// `x = j`, `y = i`). `w` spans x and `l` spans y before rotation by `heading`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectGT {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub l: f32,
    pub heading: f32,
    pub class_id: u32,
}

impl ObjectGT {
    /// The same object expressed on a map downsampled by `stride`.
    pub fn at_stride(&self, stride: usize) -> ObjectGT {
        let s = stride as f32;
        ObjectGT {
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            w: self.w / s,
            l: self.l / s,
            ..*self
        }
    }

    /// `(dx, dy, ln w, ln l, sin θ, cos θ)` relative to the rounded center cell.
    pub fn regression_target(&self) -> [f64; 6] {
        let (cx, cy) = (self.cx as f64, self.cy as f64);
        [
            cx - cx.round(),
            cy - cy.round(),
            (self.w as f64).ln(),
            (self.l as f64).ln(),
            (self.heading as f64).sin(),
            (self.heading as f64).cos(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub points: Vec<Point>,
    pub objects: Vec<ObjectGT>,
    pub bev: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn generate(config: &SceneConfig, count: usize, base_seed: u64) -> Result<Self> {
        let scenes = (0..count)
            .map(|i| generate_scene(config, base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self { scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Axis-aligned bounds `(x0, y0, x1, y1)` of a rotated `w × l` footprint.
fn footprint_bounds(cx: f64, cy: f64, w: f64, l: f64, heading: f64) -> (f64, f64, f64, f64) {
    let (s, c) = heading.sin_cos();
    let hx = 0.5 * (w * c.abs() + l * s.abs());
    let hy = 0.5 * (w * s.abs() + l * c.abs());
    (cx - hx, cy - hy, cx + hx, cy + hy)
}

fn overlaps(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), gap: f64) -> bool {
    a.0 < b.2 + gap && b.0 < a.2 + gap && a.1 < b.3 + gap && b.1 < a.3 + gap
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Generates one scene; a pure function of `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = config.extent;
    let res = config.resolution;
    let noise = Normal::new(0.0, config.intensity_noise.max(0.0)).expect("finite std-dev");

    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let n_distractors = rng.random_range(config.min_distractors..=config.max_distractors);

    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut objects = Vec::with_capacity(n_objects);
    let mut points: Vec<Point> = Vec::new();

    for k in 0..n_objects + n_distractors {
        let is_object = k < n_objects;
        let class_id = rng.random_range(0..config.num_classes);
        let tpl = CLASS_TEMPLATES[class_id];
        let (w, l) = if is_object {
            (rng.random_range(tpl.width.0..=tpl.width.1), rng.random_range(tpl.length.0..=tpl.length.1))
        } else {
            let side = rng.random_range(1.0..=2.4);
            (side, side * rng.random_range(1.0..=1.5))
        };
        let heading = rng.random_range(-std::f64::consts::FRAC_PI_6..=std::f64::consts::FRAC_PI_6);

        let mut spot = None;
        for _ in 0..config.max_retries {
            let (_, _, hx, hy) = footprint_bounds(0.0, 0.0, w, l, heading);
            if 2.0 * hx >= extent || 2.0 * hy >= extent {
                break;
            }
            let cx = rng.random_range(hx..extent - hx);
            let cy = rng.random_range(hy..extent - hy);
            let b = footprint_bounds(cx, cy, w, l, heading);
            if placed.iter().all(|&p| !overlaps(p, b, res)) {
                spot = Some((cx, cy, b));
                break;
            }
        }
        let Some((cx, cy, bounds)) = spot else {
            return Err(Error::Generation {
                seed,
                reason: format!("could not place item {k} without overlap after {} attempts", config.max_retries),
            });
        };
        placed.push(bounds);

        let area = w * l;
        let n_pts = poisson(&mut rng, config.object_density * area).max(1);
        let (s, c) = heading.sin_cos();
        let base_intensity = if is_object { tpl.intensity } else { rng.random_range(0.2..0.9) };
        for _ in 0..n_pts {
            let u = rng.random_range(-0.5..0.5) * w;
            let v = rng.random_range(-0.5..0.5) * l;
            let x = cx + u * c - v * s;
            let y = cy + u * s + v * c;
            let z = rng.random_range(0.0..tpl.height);
            let inten = (base_intensity + noise.sample(&mut rng)).clamp(0.0, 1.0);
            points.push([x as f32, y as f32, z as f32, inten as f32]);
        }
        if is_object {
            objects.push(ObjectGT {
                cx: (cx / res - 0.5) as f32,
                cy: (cy / res - 0.5) as f32,
                w: (w / res) as f32,
                l: (l / res) as f32,
                heading: heading as f32,
                class_id: class_id as u32,
            });
        }
    }

    let n_clutter = poisson(&mut rng, config.clutter_density * extent * extent);
    for _ in 0..n_clutter {
        let x = rng.random_range(0.0..extent);
        let y = rng.random_range(0.0..extent);
        let z = rng.random_range(0.0..2.0);
        let inten = rng.random_range(0.0..1.0);
        points.push([x as f32, y as f32, z as f32, inten as f32]);
    }

    let bev = rasterize_bev(&points, config);
    Ok(Scene { seed, points, objects, bev })
}

/// BEV cell `(row, col)` of a point, or `None` outside the extent.
pub fn point_cell(p: &Point, config: &SceneConfig) -> Option<(usize, usize)> {
    let n = config.grid_size();
    let (x, y) = (p[0] as f64, p[1] as f64);
    if !(x >= 0.0 && y >= 0.0 && x < config.extent && y < config.extent) {
        return None;
    }
    let j = ((x / config.resolution).floor() as usize).min(n - 1);
    let i = ((y / config.resolution).floor() as usize).min(n - 1);
    Some((i, j))
}

/// `[3, H, W]` grid: occupancy, mean intensity, count / cell capacity.
/// Points outside the extent are dropped.
pub fn rasterize_bev(points: &[Point], config: &SceneConfig) -> Tensor {
    let n = config.grid_size();
    let plane = n * n;
    let mut count = vec![0usize; plane];
    let mut inten = vec![0.0f64; plane];
    for p in points {
        if let Some((i, j)) = point_cell(p, config) {
            count[i * n + j] += 1;
            inten[i * n + j] += p[3] as f64;
        }
    }
    let mut data = vec![0.0; BEV_CHANNELS * plane];
    for k in 0..plane {
        if count[k] > 0 {
            data[k] = 1.0;
            data[plane + k] = inten[k] / count[k] as f64;
            data[2 * plane + k] = count[k] as f64 / config.cell_capacity;
        }
    }
    Tensor::new(&[BEV_CHANNELS, n, n], data).expect("consistent grid")
}

/// Gaussian-width rule for center heatmaps.
pub fn gaussian_sigma(w: f64, l: f64) -> f64 {
    (w.min(l) / 6.0).max(1.0)
}

/// Per-class center heatmap `[num_classes, h, w]`. Each object contributes
/// a unit-peak Gaussian centered on its rounded center cell; overlapping
/// contributions combine by max.
pub fn render_gt_heatmap(objects: &[ObjectGT], num_classes: usize, h: usize, w: usize) -> Tensor {
    let mut hm = Tensor::zeros(&[num_classes, h, w]);
    for o in objects {
        let k = o.class_id as usize;
        if k >= num_classes {
            continue;
        }
        let ci = (o.cy as f64).round().clamp(0.0, (h - 1) as f64);
        let cj = (o.cx as f64).round().clamp(0.0, (w - 1) as f64);
        let sigma = gaussian_sigma(o.w as f64, o.l as f64);
        let denom = 2.0 * sigma * sigma;
        let plane = &mut hm.data_mut()[k * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = (i as f64 - ci, j as f64 - cj);
                let v = (-(di * di + dj * dj) / denom).exp();
                let cell = &mut plane[i * w + j];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    hm
}

pub const SCENE_MAGIC: [u8; 4] = *b"RDDS";
pub const SCENE_VERSION: u32 = 1;

fn read_array<R: Read, const N: usize>(r: &mut R, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    crate::tensor::read_exact_or(r, &mut buf, what)?;
    Ok(buf)
}

impl SceneSet {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&SCENE_MAGIC)?;
        w.write_all(&SCENE_VERSION.to_le_bytes())?;
        w.write_all(&(self.scenes.len() as u32).to_le_bytes())?;
        for s in &self.scenes {
            w.write_all(&s.seed.to_le_bytes())?;
            w.write_all(&(s.objects.len() as u32).to_le_bytes())?;
            for o in &s.objects {
                for v in [o.cx, o.cy, o.w, o.l, o.heading] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&o.class_id.to_le_bytes())?;
            }
            w.write_all(&(s.points.len() as u32).to_le_bytes())?;
            for p in &s.points {
                for v in p {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            write_tensor(w, &s.bev)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_array::<_, 4>(r, "scene-set magic")?;
        if magic != SCENE_MAGIC {
            return Err(LoadError::BadMagic { expected: SCENE_MAGIC, found: magic }.into());
        }
        let version = u32::from_le_bytes(read_array(r, "scene-set version")?);
        if version != SCENE_VERSION {
            return Err(LoadError::Version { expected: SCENE_VERSION, found: version }.into());
        }
        let count = u32::from_le_bytes(read_array(r, "scene count")?) as usize;
        let mut scenes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let seed = u64::from_le_bytes(read_array(r, "scene seed")?);
            let n_obj = u32::from_le_bytes(read_array(r, "object count")?) as usize;
            let mut objects = Vec::with_capacity(n_obj.min(1 << 16));
            for _ in 0..n_obj {
                let rec: [u8; 24] = read_array(r, "object record")?;
                let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
                let class_id = u32::from_le_bytes(rec[20..24].try_into().expect("4 bytes"));
                objects.push(ObjectGT { cx: f(0), cy: f(1), w: f(2), l: f(3), heading: f(4), class_id });
            }
            let n_pts = u32::from_le_bytes(read_array(r, "point count")?) as usize;
            let mut points = Vec::with_capacity(n_pts.min(1 << 20));
            for _ in 0..n_pts {
                let rec: [u8; 16] = read_array(r, "point record")?;
                let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
                points.push([f(0), f(1), f(2), f(3)]);
            }
            let bev = read_tensor(r)?;
            if bev.rank() != 3 {
                return Err(LoadError::Malformed(format!("bev tensor has rank {}", bev.rank())).into());
            }
            scenes.push(Scene { seed, points, objects, bev });
        }
        Ok(Self { scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn small() -> SceneConfig {
        SceneConfig { extent: 25.6, resolution: 0.8, max_objects: 4, ..SceneConfig::default() }
    }

    #[test]
    fn zero_objects_gives_clutter_only() {
        let cfg = SceneConfig { min_objects: 0, max_objects: 0, max_distractors: 0, ..small() };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.bev, rasterize_bev(&s.points, &cfg));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small(), 42).unwrap();
        let b = generate_scene(&small(), 42).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        SceneSet { scenes: vec![a] }.write_to(&mut ba).unwrap();
        SceneSet { scenes: vec![b] }.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn crowded_config_reports_seed() {
        let cfg = SceneConfig { extent: 8.0, resolution: 0.8, min_objects: 30, max_objects: 30, max_retries: 20, ..SceneConfig::default() };
        match generate_scene(&cfg, 77) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 77),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn clutter_count_matches_poisson_mean() {
        // Poisson oracle: mean of 100 draws of Poisson(d·A) lies within
        // 3·sqrt(d·A / 100) of d·A.
        let cfg = SceneConfig { min_objects: 0, max_objects: 0, max_distractors: 0, clutter_density: 0.3, ..small() };
        let expected = cfg.clutter_density * cfg.extent * cfg.extent;
        let mean = (0..100).map(|s| generate_scene(&cfg, s).unwrap().points.len() as f64).sum::<f64>() / 100.0;
        let sigma = (expected / 100.0).sqrt();
        assert!((mean - expected).abs() < 3.0 * sigma, "mean {mean} vs {expected} ± {}", 3.0 * sigma);
    }

    #[test]
    fn rasterize_empty_and_single_point() {
        let cfg = small();
        let n = cfg.grid_size();
        assert_eq!(rasterize_bev(&[], &cfg), Tensor::zeros(&[3, n, n]));
        let p = [0.8 * 5.5, 0.8 * 2.5, 0.0, 0.7];
        let g = rasterize_bev(&[p], &cfg);
        assert_eq!(g.get(&[0, 2, 5]), 1.0);
        assert!((g.get(&[1, 2, 5]) - 0.7).abs() < 1e-6);
        assert_eq!(g.sum() as f32, 1.0 + 0.7f32 + (1.0 / cfg.cell_capacity) as f32);
    }

    #[test]
    fn rasterize_counts_match_binning_oracle() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point> = (0..500)
            .map(|_| [rng.random_range(-2.0f32..28.0), rng.random_range(-2.0f32..28.0), 0.0, rng.random_range(0.0f32..1.0)])
            .collect();
        // oracle: hash-bucket by integer cell key
        let mut buckets = std::collections::HashMap::<(i64, i64), usize>::new();
        let mut inside = 0;
        for p in &pts {
            let (x, y) = (p[0] as f64, p[1] as f64);
            if x < 0.0 || y < 0.0 || x >= cfg.extent || y >= cfg.extent {
                continue;
            }
            inside += 1;
            *buckets.entry(((y / 0.8) as i64, (x / 0.8) as i64)).or_default() += 1;
        }
        let g = rasterize_bev(&pts, &cfg);
        let n = cfg.grid_size();
        for i in 0..n {
            for j in 0..n {
                let expected = buckets.get(&(i as i64, j as i64)).copied().unwrap_or(0) as f64;
                assert!((g.get(&[2, i, j]) * cfg.cell_capacity - expected).abs() < 1e-9);
            }
        }
        let total: f64 = g.data()[2 * n * n..].iter().sum::<f64>() * cfg.cell_capacity;
        assert!((total - inside as f64).abs() < 1e-9);
    }

    #[test]
    fn heatmap_single_and_empty() {
        assert_eq!(render_gt_heatmap(&[], 3, 8, 8), Tensor::zeros(&[3, 8, 8]));
        let o = ObjectGT { cx: 3.3, cy: 4.6, w: 3.0, l: 5.0, heading: 0.0, class_id: 1 };
        let hm = render_gt_heatmap(&[o], 3, 8, 8);
        assert_eq!(hm.get(&[1, 5, 3]), 1.0);
        assert_eq!(hm.data().iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(hm.index_outer(0).sum(), 0.0);
    }

    #[test]
    fn overlapping_heatmaps_combine_by_max() {
        let a = ObjectGT { cx: 3.0, cy: 3.0, w: 12.0, l: 12.0, heading: 0.0, class_id: 0 };
        let b = ObjectGT { cx: 5.0, cy: 4.0, w: 6.0, l: 9.0, heading: 0.3, class_id: 0 };
        let hm = render_gt_heatmap(&[a, b], 1, 10, 10);
        let g = |o: &ObjectGT, i: usize, j: usize| {
            let s = gaussian_sigma(o.w as f64, o.l as f64);
            let (di, dj) = (i as f64 - (o.cy as f64).round(), j as f64 - (o.cx as f64).round());
            (-(di * di + dj * dj) / (2.0 * s * s)).exp()
        };
        for i in 0..10 {
            for j in 0..10 {
                let want = g(&a, i, j).max(g(&b, i, j));
                assert!((hm.get(&[0, i, j]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scene_set_round_trip_and_errors() {
        let set = SceneSet::generate(&small(), 10, 5).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(SceneSet::read_from(&mut &buf[..]).unwrap(), set);

        let cut = &buf[..buf.len() / 2];
        assert!(matches!(SceneSet::read_from(&mut &cut[..]), Err(Error::Load(LoadError::Truncated(_)))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(SceneSet::read_from(&mut &bad[..]), Err(Error::Load(LoadError::Version { .. }))));
        bad[0] = b'Q';
        assert!(matches!(SceneSet::read_from(&mut &bad[..]), Err(Error::Load(LoadError::BadMagic { .. }))));

        let mut empty = Vec::new();
        SceneSet::default().write_to(&mut empty).unwrap();
        assert_eq!(empty.len(), 12);
        assert!(SceneSet::read_from(&mut &empty[..]).unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn invariants_hold(seed in any::<u64>()) {
            let cfg = small();
            let s = generate_scene(&cfg, seed).unwrap();
            let n = cfg.grid_size();
            for o in &s.objects {
                prop_assert!(o.w > 0.0 && o.l > 0.0);
                prop_assert!(o.cx >= -0.5 && o.cx < n as f32 - 0.5);
                prop_assert!(o.cy >= -0.5 && o.cy < n as f32 - 0.5);
            }
            // heatmap peak invariant
            let hm = render_gt_heatmap(&s.objects, cfg.num_classes, n, n);
            for o in &s.objects {
                let i = (o.cy as f64).round() as usize;
                let j = (o.cx as f64).round() as usize;
                prop_assert_eq!(hm.get(&[o.class_id as usize, i, j]), 1.0);
            }
            // conservation of the count channel
            let inside = s.points.iter().filter(|p| point_cell(p, &cfg).is_some()).count();
            let total: f64 = s.bev.data()[2 * n * n..].iter().sum::<f64>() * cfg.cell_capacity;
            prop_assert!((total - inside as f64).abs() < 1e-6);
        }
    }
}
