//! Ground-truth density maps and the synthetic scene generator.
//!
//! Density maps place one truncated, renormalised 2-D Gaussian per annotated
//! head. In adaptive mode the per-point sigma is `beta` times the mean
//! distance to the `k` nearest annotated neighbours; the kernel is cut off
//! at four sigma and renormalised to unit mass inside the image, so the map
//! integral equals the head count. Downsampling to the prediction stride
//! sums disjoint blocks, which preserves counts.
//!
//! Synthetic scenes mirror the failure modes multimodal counting cares
//! about: in dark scenes people are invisible in the RGB channels but warm
//! in the thermal channel; thermal-only distractor blobs look like people
//! without being annotated; and the thermal content can be shifted by a few
//! pixels against the RGB frame to imitate unaligned sensors.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Lighting condition of a scene.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Illumination {
    Bright,
    Dark,
}

impl Illumination {
    pub fn as_str(self) -> &'static str {
        match self {
            Illumination::Bright => "bright",
            Illumination::Dark => "dark",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bright" => Ok(Illumination::Bright),
            "dark" => Ok(Illumination::Dark),
            other => Err(Error::config(format!(
                "unknown illumination `{other}` (expected bright or dark)"
            ))),
        }
    }
}

/// Point annotations for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    /// Head positions in pixel coordinates, `0 <= x < w`, `0 <= y < h`.
    pub points: Vec<(f64, f64)>,
    pub height: usize,
    pub width: usize,
    pub illumination: Illumination,
}

impl AnnotationSet {
    pub fn new(
        points: Vec<(f64, f64)>,
        height: usize,
        width: usize,
        illumination: Illumination,
    ) -> Result<Self> {
        let a = AnnotationSet {
            points,
            height,
            width,
            illumination,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for &(x, y) in &self.points {
            if !(x >= 0.0 && x < self.width as f64 && y >= 0.0 && y < self.height as f64) {
                return Err(Error::config(format!(
                    "annotation point ({x}, {y}) lies outside a {}x{} image",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Per-point Gaussian width policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    /// sigma = beta * (mean distance to the k nearest neighbours); falls
    /// back to `fallback` when fewer than k+1 points exist.
    Adaptive { beta: f64, k: usize, fallback: f64 },
    Fixed(f64),
}

impl SigmaMode {
    /// Geometry-adaptive defaults: beta 0.3, k 3, fallback sigma 2 px.
    pub fn adaptive() -> Self {
        SigmaMode::Adaptive {
            beta: 0.3,
            k: 3,
            fallback: 2.0,
        }
    }

    pub fn as_str(&self) -> String {
        match self {
            SigmaMode::Adaptive { .. } => "adaptive".into(),
            SigmaMode::Fixed(s) => format!("fixed:{s}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(SigmaMode::adaptive());
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let sigma: f64 = v
                .parse()
                .map_err(|_| Error::config(format!("bad fixed sigma `{v}`")))?;
            if sigma <= 0.0 {
                return Err(Error::config("fixed sigma must be positive"));
            }
            return Ok(SigmaMode::Fixed(sigma));
        }
        Err(Error::config(format!(
            "unknown sigma mode `{s}` (expected adaptive or fixed:<sigma>)"
        )))
    }
}

/// A generated density map plus generation metadata.
#[derive(Clone, Debug)]
pub struct DensityMap {
    /// Shape (1, 1, ceil(h/stride), ceil(w/stride)).
    pub map: Tensor,
    /// True when adaptive mode fell back to the fixed sigma because the
    /// scene has too few points.
    pub sigma_fallback: bool,
}

/// Per-point sigmas under the given mode.
fn point_sigmas(points: &[(f64, f64)], mode: SigmaMode) -> (Vec<f64>, bool) {
    match mode {
        SigmaMode::Fixed(sigma) => (vec![sigma; points.len()], false),
        SigmaMode::Adaptive { beta, k, fallback } => {
            if points.len() < k + 1 {
                return (vec![fallback; points.len()], true);
            }
            let sigmas = points
                .iter()
                .map(|&(x, y)| {
                    let mut d: Vec<f64> = points
                        .iter()
                        .map(|&(ox, oy)| ((ox - x).powi(2) + (oy - y).powi(2)).sqrt())
                        .collect();
                    // Index 0 after sorting is the point itself (distance 0).
                    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let mean: f64 = d[1..=k].iter().sum::<f64>() / k as f64;
                    (beta * mean).max(1e-3)
                })
                .collect();
            (sigmas, false)
        }
    }
}

/// Renders one truncated, renormalised Gaussian into `map`.
fn splat_gaussian(map: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, sigma: f64) {
    let radius = (4.0 * sigma).ceil();
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(w - 1);
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil() as usize).min(h - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut mass = 0.0;
    let mut values = Vec::with_capacity((y1 - y0 + 1) * (x1 - x0 + 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let v = (-d2 * inv).exp();
            values.push(v);
            mass += v;
        }
    }
    if mass == 0.0 {
        // Degenerate window; assign the whole unit mass to the nearest cell.
        let x = (cx.round() as usize).min(w - 1);
        let y = (cy.round() as usize).min(h - 1);
        map[y * w + x] += 1.0;
        return;
    }
    let mut i = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            map[y * w + x] += values[i] / mass;
            i += 1;
        }
    }
}

/// Sums disjoint `stride x stride` blocks; output dims are `ceil(dim/stride)`.
fn block_sum_downsample(full: &Tensor, stride: usize) -> Tensor {
    let s = full.shape();
    let oh = s.h.div_ceil(stride);
    let ow = s.w.div_ceil(stride);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let idx = out.shape().idx(n, c, y / stride, x / stride);
                    out.data_mut()[idx] += full.get(n, c, y, x);
                }
            }
        }
    }
    out
}

/// Ground-truth density map at the given stride; the map sums to the
/// annotation count (up to floating-point roundoff).
pub fn density_map(a: &AnnotationSet, mode: SigmaMode, stride: usize) -> Result<DensityMap> {
    a.validate()?;
    if stride == 0 {
        return Err(Error::config("density_map: stride must be positive"));
    }
    if let SigmaMode::Fixed(s) = mode {
        if s <= 0.0 {
            return Err(Error::config("density_map: fixed sigma must be positive"));
        }
    }
    let (h, w) = (a.height, a.width);
    let mut full = Tensor::zeros(Shape::new(1, 1, h, w));
    let (sigmas, sigma_fallback) = point_sigmas(&a.points, mode);
    for (&(x, y), &sigma) in a.points.iter().zip(&sigmas) {
        splat_gaussian(full.data_mut(), h, w, x, y, sigma);
    }
    let map = if stride == 1 {
        full
    } else {
        block_sum_downsample(&full, stride)
    };
    Ok(DensityMap {
        map,
        sigma_fallback,
    })
}

/// Hard ceiling on synthetic sensor misalignment, matching the translation
/// tolerance of a 3-level pooling pyramid.
pub const MAX_MISALIGNMENT: i32 = 4;

/// Recipe for one synthetic RGB + thermal scene.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range the person count is drawn from.
    pub persons: (usize, usize),
    pub illumination: Illumination,
    /// Thermal-only hot blobs that are not people.
    pub distractors: usize,
    /// Pixel shift (dx, dy) of the thermal content against the RGB frame.
    pub misalignment: (i32, i32),
    /// Standard deviation of additive Gaussian sensor noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 48,
            width: 64,
            persons: (4, 12),
            illumination: Illumination::Bright,
            distractors: 2,
            misalignment: (0, 0),
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("scene size must be at least 8x8"));
        }
        if self.persons.0 > self.persons.1 {
            return Err(Error::config(format!(
                "person count range {}..{} is empty",
                self.persons.0, self.persons.1
            )));
        }
        let (dx, dy) = self.misalignment;
        if dx.abs() > MAX_MISALIGNMENT || dy.abs() > MAX_MISALIGNMENT {
            return Err(Error::config(format!(
                "misalignment ({dx}, {dy}) exceeds the +/-{MAX_MISALIGNMENT} px budget"
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise level must be non-negative"));
        }
        Ok(())
    }
}

/// One generated scene: named modality tensors plus annotations.
#[derive(Clone, Debug)]
pub struct Scene {
    /// `(name, tensor)` pairs, e.g. `rgb` (1,3,h,w) and `thermal` (1,1,h,w).
    pub modalities: Vec<(String, Tensor)>,
    pub annotations: AnnotationSet,
}

impl Scene {
    pub fn modality(&self, name: &str) -> Option<&Tensor> {
        self.modalities
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

fn add_blob(plane: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, sigma: f64, amplitude: f64) {
    let radius = (3.0 * sigma).ceil();
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let y1 = ((cy + radius).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    if x0 > x1 || y0 > y1 {
        return;
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            plane[y * w + x] += amplitude * (-d2 * inv).exp();
        }
    }
}

/// Deterministic synthetic scene. People are warm blobs in the thermal
/// channel always and visible in RGB only under bright illumination;
/// distractors appear in thermal only; all thermal content is shifted by
/// the configured misalignment.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let count = rng.gen_range(spec.persons.0..=spec.persons.1);
    let margin = 2.0;
    let draw_position = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(margin..w as f64 - 1.0 - margin),
            rng.gen_range(margin..h as f64 - 1.0 - margin),
        )
    };

    struct Blob {
        x: f64,
        y: f64,
        sigma: f64,
        heat: f64,
    }
    let mut persons = Vec::with_capacity(count);
    for _ in 0..count {
        let (x, y) = draw_position(&mut rng);
        persons.push(Blob {
            x,
            y,
            sigma: rng.gen_range(1.3..2.2),
            heat: rng.gen_range(0.8..1.2),
        });
    }
    let mut distractors = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let (x, y) = draw_position(&mut rng);
        distractors.push(Blob {
            x,
            y,
            sigma: rng.gen_range(1.3..2.2),
            heat: rng.gen_range(0.8..1.2),
        });
    }

    let rgb_base = match spec.illumination {
        Illumination::Bright => 0.25,
        Illumination::Dark => 0.05,
    };
    let mut rgb = Tensor::filled(Shape::new(1, 3, h, w), rgb_base);
    let mut thermal = Tensor::filled(Shape::new(1, 1, h, w), 0.15);

    if spec.illumination == Illumination::Bright {
        // People read as warm-coloured blobs, strongest in the red channel.
        let gains = [1.0, 0.45, 0.3];
        for p in &persons {
            for (c, gain) in gains.iter().enumerate() {
                let plane = &mut rgb.data_mut()[c * h * w..(c + 1) * h * w];
                add_blob(plane, h, w, p.x, p.y, p.sigma, 0.8 * gain);
            }
        }
    }
    let (dx, dy) = spec.misalignment;
    let th_plane = thermal.data_mut();
    for b in persons.iter().chain(&distractors) {
        add_blob(
            th_plane,
            h,
            w,
            b.x + dx as f64,
            b.y + dy as f64,
            b.sigma,
            b.heat,
        );
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).unwrap();
        for v in rgb.data_mut() {
            *v += normal.sample(&mut rng);
        }
        for v in thermal.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let annotations = AnnotationSet::new(
        persons.iter().map(|p| (p.x, p.y)).collect(),
        h,
        w,
        spec.illumination,
    )?;
    Ok(Scene {
        modalities: vec![("rgb".into(), rgb), ("thermal".into(), thermal)],
        annotations,
    })
}

/// Options for generating a whole dataset of scenes.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub base: SceneSpec,
    /// Alternate bright/dark instead of using `base.illumination`.
    pub illumination_split: bool,
    /// Draw each scene's misalignment uniformly from `[-max, max]^2`.
    pub misalign_max: i32,
    /// When set, draw each scene's distractor count uniformly from this
    /// inclusive range instead of using `base.distractors`. A varying
    /// count denies thermal-only models a learnable constant offset.
    pub distractor_range: Option<(usize, usize)>,
    pub seed: u64,
}

/// Generates `spec.scenes` scenes with per-scene seeds derived from
/// `spec.seed`.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    if spec.misalign_max.abs() > MAX_MISALIGNMENT {
        return Err(Error::config(format!(
            "misalign_max {} exceeds the +/-{MAX_MISALIGNMENT} px budget",
            spec.misalign_max
        )));
    }
    let mut meta = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scenes = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let mut s = spec.base.clone();
        s.seed = spec.seed.wrapping_add(1 + i as u64);
        if spec.illumination_split {
            s.illumination = if i % 2 == 0 {
                Illumination::Bright
            } else {
                Illumination::Dark
            };
        }
        if spec.misalign_max > 0 {
            s.misalignment = (
                meta.gen_range(-spec.misalign_max..=spec.misalign_max),
                meta.gen_range(-spec.misalign_max..=spec.misalign_max),
            );
        }
        if let Some((lo, hi)) = spec.distractor_range {
            s.distractors = meta.gen_range(lo..=hi);
        }
        scenes.push(synth_scene(&s)?);
    }
    Ok(scenes)
}

// Annotation text format: line 1 `h w count illumination`, then one
// `x y` pair per line.

pub fn annotations_to_string(a: &AnnotationSet) -> String {
    let mut s = format!(
        "{} {} {} {}\n",
        a.height,
        a.width,
        a.count(),
        a.illumination.as_str()
    );
    for &(x, y) in &a.points {
        s.push_str(&format!("{x} {y}\n"));
    }
    s
}

pub fn parse_annotations(text: &str, file: &str) -> Result<AnnotationSet> {
    let perr = |line: usize, msg: String| Error::Parse {
        file: file.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| perr(1, "empty annotation file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(perr(1, format!("expected `h w count illumination`, found `{header}`")));
    }
    let height: usize = fields[0]
        .parse()
        .map_err(|_| perr(1, format!("bad height `{}`", fields[0])))?;
    let width: usize = fields[1]
        .parse()
        .map_err(|_| perr(1, format!("bad width `{}`", fields[1])))?;
    let count: usize = fields[2]
        .parse()
        .map_err(|_| perr(1, format!("bad count `{}`", fields[2])))?;
    let illumination =
        Illumination::parse(fields[3]).map_err(|e| perr(1, e.to_string()))?;
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (xs, ys) = line
            .split_once(' ')
            .ok_or_else(|| perr(lineno, format!("expected `x y`, found `{line}`")))?;
        let x: f64 = xs
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("bad x coordinate `{xs}`")))?;
        let y: f64 = ys
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("bad y coordinate `{ys}`")))?;
        if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
            return Err(perr(
                lineno,
                format!("point ({x}, {y}) lies outside a {height}x{width} image"),
            ));
        }
        points.push((x, y));
    }
    if points.len() != count {
        return Err(perr(
            1,
            format!("header declares {count} points but {} follow", points.len()),
        ));
    }
    AnnotationSet::new(points, height, width, illumination)
}

pub fn save_annotations(a: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, annotations_to_string(a))?;
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_annotations(&text, &path.display().to_string())
}

// Dataset directory layout: index.txt lists the modality names and one
// scene id per line; each scene stores one tensor dump per modality plus
// an annotation file.

pub fn save_dataset(scenes: &[Scene], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let modality_names: Vec<String> = scenes
        .first()
        .map(|s| s.modalities.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut index = format!("modalities {}\n", modality_names.join(" "));
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("scene_{i:04}");
        for (name, t) in &scene.modalities {
            t.save(dir.join(format!("{id}.{name}.bin")))?;
        }
        save_annotations(&scene.annotations, dir.join(format!("{id}.ann.txt")))?;
        index.push_str(&id);
        index.push('\n');
    }
    fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| {
        Error::usage(format!("cannot read dataset index {}: {e}", index_path.display()))
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        file: index_path.display().to_string(),
        line: 1,
        msg: "empty dataset index".into(),
    })?;
    let modality_names: Vec<&str> = header
        .strip_prefix("modalities")
        .ok_or_else(|| Error::Parse {
            file: index_path.display().to_string(),
            line: 1,
            msg: format!("expected `modalities <names>`, found `{header}`"),
        })?
        .split_whitespace()
        .collect();
    let mut scenes = Vec::new();
    for id in lines {
        let id = id.trim();
        if id.is_empty() {
            continue;
        }
        let mut modalities = Vec::with_capacity(modality_names.len());
        for name in &modality_names {
            let t = Tensor::load(dir.join(format!("{id}.{name}.bin")))?;
            modalities.push((name.to_string(), t));
        }
        let annotations = load_annotations(dir.join(format!("{id}.ann.txt")))?;
        scenes.push(Scene {
            modalities,
            annotations,
        });
    }
    Ok(scenes)
}

/// Writes a single-channel tensor as a binary 8-bit PGM, min-max scaled.
pub fn write_pgm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::usage(format!(
            "PGM export expects a single-channel tensor, found shape {s}"
        )));
    }
    let (lo, hi) = (t.min(), t.max());
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = Vec::with_capacity(64 + t.numel());
    write!(out, "P5\n{} {}\n255\n", s.w, s.h)?;
    for v in t.data() {
        out.push(((v - lo) * scale).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_gives_zero_map() {
        let a = AnnotationSet::new(vec![], 16, 16, Illumination::Bright).unwrap();
        let d = density_map(&a, SigmaMode::Fixed(2.0), 1).unwrap();
        assert_eq!(d.map.sum(), 0.0);
    }

    #[test]
    fn single_point_sums_to_one() {
        let a = AnnotationSet::new(vec![(8.0, 8.0)], 17, 17, Illumination::Bright).unwrap();
        let d = density_map(&a, SigmaMode::Fixed(1.5), 1).unwrap();
        assert!((d.map.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn boundary_point_keeps_unit_mass() {
        let a = AnnotationSet::new(vec![(0.0, 0.0)], 16, 16, Illumination::Bright).unwrap();
        let d = density_map(&a, SigmaMode::Fixed(2.0), 1).unwrap();
        assert!((d.map.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adaptive_falls_back_when_sparse() {
        let a = AnnotationSet::new(vec![(4.0, 4.0), (9.0, 9.0)], 16, 16, Illumination::Bright)
            .unwrap();
        let d = density_map(&a, SigmaMode::adaptive(), 1).unwrap();
        assert!(d.sigma_fallback);
        assert!((d.map.sum() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn downsampled_sum_matches_full_sum() {
        let a = AnnotationSet::new(
            vec![(3.2, 4.7), (10.0, 2.0), (30.5, 20.25), (31.0, 21.0), (5.0, 22.0)],
            24,
            33,
            Illumination::Dark,
        )
        .unwrap();
        let full = density_map(&a, SigmaMode::adaptive(), 1).unwrap();
        for stride in [4, 8] {
            let d = density_map(&a, SigmaMode::adaptive(), stride).unwrap();
            assert_eq!(d.map.shape().h, 24usize.div_ceil(stride));
            assert_eq!(d.map.shape().w, 33usize.div_ceil(stride));
            assert!((d.map.sum() - full.map.sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_sigma_scales_with_coordinates() {
        let pts = vec![(4.0, 5.0), (9.0, 6.0), (6.0, 11.0), (13.0, 13.0), (3.0, 12.0)];
        let (s1, f1) = point_sigmas(&pts, SigmaMode::adaptive());
        let doubled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (2.0 * x, 2.0 * y)).collect();
        let (s2, f2) = point_sigmas(&doubled, SigmaMode::adaptive());
        assert!(!f1 && !f2);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn dark_scenes_hide_people_from_rgb() {
        let spec = SceneSpec {
            illumination: Illumination::Dark,
            noise: 0.0,
            distractors: 0,
            persons: (10, 10),
            ..SceneSpec::default()
        };
        let scene = synth_scene(&spec).unwrap();
        let rgb = scene.modality("rgb").unwrap();
        // Without noise the dark RGB image is exactly its base level.
        assert!(rgb.data().iter().all(|&v| v == 0.05));
        let thermal = scene.modality("thermal").unwrap();
        assert!(thermal.max() > 0.5);
        assert_eq!(scene.annotations.count(), 10);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SceneSpec {
            seed: 77,
            ..SceneSpec::default()
        };
        let a = synth_scene(&spec).unwrap();
        let b = synth_scene(&spec).unwrap();
        for ((_, ta), (_, tb)) in a.modalities.iter().zip(&b.modalities) {
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(a.annotations, b.annotations);
    }

    #[test]
    fn distractors_heat_thermal_without_annotations() {
        let spec = SceneSpec {
            persons: (0, 0),
            distractors: 5,
            noise: 0.0,
            ..SceneSpec::default()
        };
        let scene = synth_scene(&spec).unwrap();
        assert_eq!(scene.annotations.count(), 0);
        let thermal = scene.modality("thermal").unwrap();
        assert!(thermal.max() > 0.5, "distractor blobs missing from thermal");
    }

    #[test]
    fn annotation_round_trip() {
        let a = AnnotationSet::new(
            vec![(1.5, 2.25), (10.0, 3.0)],
            32,
            40,
            Illumination::Dark,
        )
        .unwrap();
        let text = annotations_to_string(&a);
        let back = parse_annotations(&text, "<mem>").unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_body_with_zero_count_parses() {
        let a = parse_annotations("8 8 0 bright\n", "<mem>").unwrap();
        assert_eq!(a.count(), 0);
    }

    #[test]
    fn out_of_bounds_point_is_rejected_with_coordinates() {
        let err = parse_annotations("8 8 1 bright\n9.5 2\n", "<mem>").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("9.5") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn count_mismatch_is_rejected() {
        assert!(parse_annotations("8 8 2 bright\n1 1\n", "<mem>").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            scenes: 3,
            base: SceneSpec::default(),
            illumination_split: true,
            misalign_max: 2,
            distractor_range: Some((0, 3)),
            seed: 5,
        };
        let scenes = synth_dataset(&spec).unwrap();
        assert_eq!(scenes[0].annotations.illumination, Illumination::Bright);
        assert_eq!(scenes[1].annotations.illumination, Illumination::Dark);
        save_dataset(&scenes, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.annotations, b.annotations);
            for ((na, ta), (nb, tb)) in a.modalities.iter().zip(&b.modalities) {
                assert_eq!(na, nb);
                assert_eq!(ta.data(), tb.data());
            }
        }
    }

    #[test]
    fn pgm_export_writes_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let t = Tensor::from_vec(
            Shape::new(1, 1, 2, 3),
            vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0],
        )
        .unwrap();
        write_pgm(&t, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(bytes[bytes.len() - 6], 0); // min maps to 0
        assert_eq!(bytes[bytes.len() - 4], 255); // max maps to 255
    }

    #[test]
    fn misalignment_budget_is_enforced() {
        let spec = SceneSpec {
            misalignment: (5, 0),
            ..SceneSpec::default()
        };
        assert!(synth_scene(&spec).is_err());
    }
}
