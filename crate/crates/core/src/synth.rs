//! Synthetic in-the-wild datasets with known clean ground truth.
//!
//! A closed-form scene (color ramps + smooth blobs + sinusoidal stripes,
//! clamped into [0.03, 0.72] so illumination gains never saturate) is
//! observed through per-view affines. Each training view is corrupted by
//! transient ellipses (view-space occluders) and per-channel gain/bias;
//! its clean reference keeps the same geometry with canonical illumination
//! and no transients. True masks record the exact transient footprint;
//! prior masks are deliberately corrupted (dilate/erode, whole-region
//! flips, occasional spurious region) to mimic imperfect segmentation.
//!
//! Everything is a pure function of (seed, spec): each view draws from its
//! own ChaCha stream, so datasets are reproducible bit-for-bit.

use crate::cloud::{Mat2, View};
use crate::img::Image;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;
/// Scene intensity range; leaves headroom for gain 1.3 + bias 0.015.
const SCENE_LO: f64 = 0.03;
const SCENE_HI: f64 = 0.72;
/// Acceptable transient union coverage when any ellipses are present.
const COVER_LO: f64 = 0.02;
const COVER_HI: f64 = 0.25;
const COVER_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionLevel {
    None,
    Low,
    Medium,
    High,
}

impl OcclusionLevel {
    fn draw_count(self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            OcclusionLevel::None => 0,
            OcclusionLevel::Low => rng.gen_range(0..=1),
            OcclusionLevel::Medium => rng.gen_range(1..=3),
            OcclusionLevel::High => rng.gen_range(3..=6),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OcclusionLevel::None),
            "low" => Ok(OcclusionLevel::Low),
            "medium" => Ok(OcclusionLevel::Medium),
            "high" => Ok(OcclusionLevel::High),
            other => Err(Error::Config(format!("unknown occlusion level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlluminationLevel {
    None,
    Mild,
    Strong,
}

impl IlluminationLevel {
    pub fn delta(self) -> f64 {
        match self {
            IlluminationLevel::None => 0.0,
            IlluminationLevel::Mild => 0.1,
            IlluminationLevel::Strong => 0.3,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IlluminationLevel::None),
            "mild" => Ok(IlluminationLevel::Mild),
            "strong" => Ok(IlluminationLevel::Strong),
            other => Err(Error::Config(format!("unknown illumination level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub resolution: usize,
    pub num_views: usize,
    pub num_heldout: usize,
    pub occlusion: OcclusionLevel,
    pub illumination: IlluminationLevel,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::Config("resolution must be >= 32".into()));
        }
        if self.num_views < 2 {
            return Err(Error::Config("num_views must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    center: [f64; 2],
    radius: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stripe {
    dir: [f64; 2],
    freq: f64,
    phase: f64,
    amp: [f64; 3],
}

/// Closed-form scene: evaluable at any point of the plane, so views can
/// look slightly outside the unit square without special cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    base: [f64; 3],
    ramp_x: [f64; 3],
    ramp_y: [f64; 3],
    blobs: Vec<Blob>,
    stripes: Vec<Stripe>,
}

pub fn generate_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SCENE_STREAM);
    fn three(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
        [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
    }
    let base = three(&mut rng, 0.25, 0.45);
    let ramp_x = three(&mut rng, -0.15, 0.15);
    let ramp_y = three(&mut rng, -0.15, 0.15);
    let n_blobs = rng.gen_range(4..=7);
    let mut blobs = Vec::with_capacity(n_blobs);
    for i in 0..n_blobs {
        // The first blob is pinned to the scene center by construction.
        let center = if i == 0 {
            [0.5, 0.5]
        } else {
            [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
        };
        let radius = rng.gen_range(0.06..0.2);
        blobs.push(Blob { center, radius, color: three(&mut rng, -0.3, 0.3) });
    }
    let n_stripes = rng.gen_range(2..=3);
    let mut stripes = Vec::with_capacity(n_stripes);
    for _ in 0..n_stripes {
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let freq = rng.gen_range(2.0..7.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        stripes.push(Stripe {
            dir: [angle.cos(), angle.sin()],
            freq,
            phase,
            amp: three(&mut rng, -0.08, 0.08),
        });
    }
    Scene { base, ramp_x, ramp_y, blobs, stripes }
}

// Stream ids for the per-purpose ChaCha substreams: the scene, each
// training view, and each held-out view draw independently, so adding
// views never perturbs existing ones.
const SCENE_STREAM: u64 = 0;
fn view_stream(i: usize) -> u64 {
    1 + i as u64
}
fn heldout_stream(i: usize) -> u64 {
    1_000_003 + i as u64
}

impl Scene {
    pub fn sample(&self, p: [f64; 2]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for ch in 0..3 {
            c[ch] = self.base[ch] + self.ramp_x[ch] * p[0] + self.ramp_y[ch] * p[1];
        }
        for b in &self.blobs {
            let dx = p[0] - b.center[0];
            let dy = p[1] - b.center[1];
            let w = (-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius)).exp();
            for ch in 0..3 {
                c[ch] += b.color[ch] * w;
            }
        }
        for s in &self.stripes {
            let t = (std::f64::consts::TAU * s.freq * (s.dir[0] * p[0] + s.dir[1] * p[1])
                + s.phase)
                .sin();
            for ch in 0..3 {
                c[ch] += s.amp[ch] * t;
            }
        }
        for v in c.iter_mut() {
            *v = v.clamp(SCENE_LO, SCENE_HI);
        }
        c
    }

    /// Renders the scene through a view affine at the given resolution:
    /// pixel centers are pulled back to world coordinates.
    pub fn render_through(&self, affine: &Mat2, translation: [f64; 2], res: usize) -> Image {
        let inv = affine.inverse().expect("view affine is invertible");
        Image::from_fn(res, res, 3, |y, x, ch| {
            let u = [(x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64];
            let p = inv.matvec([u[0] - translation[0], u[1] - translation[1]]);
            self.sample(p)[ch]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub angle: f64,
    pub color: [f64; 3],
}

impl Ellipse {
    fn contains(&self, u: [f64; 2]) -> bool {
        let dx = u[0] - self.center[0];
        let dy = u[1] - self.center[1];
        let (s, c) = self.angle.sin_cos();
        let qx = c * dx + s * dy;
        let qy = -s * dx + c * dy;
        let a = qx / self.semi_axes[0];
        let b = qy / self.semi_axes[1];
        a * a + b * b <= 1.0
    }

    fn footprint(&self, res: usize) -> Vec<bool> {
        let mut out = vec![false; res * res];
        for y in 0..res {
            for x in 0..res {
                let u = [(x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64];
                out[y * res + x] = self.contains(u);
            }
        }
        out
    }
}

fn draw_ellipse(rng: &mut ChaCha8Rng) -> Ellipse {
    Ellipse {
        center: [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)],
        semi_axes: [rng.gen_range(0.05..0.22), rng.gen_range(0.05..0.22)],
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        color: [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ],
    }
}

/// Draws k ellipses whose union covers 2-25% of the frame, retrying a
/// bounded number of times and keeping the attempt closest to the band if
/// none lands inside it (keeps generation total).
fn draw_transients(rng: &mut ChaCha8Rng, k: usize, res: usize) -> Vec<Ellipse> {
    if k == 0 {
        return Vec::new();
    }
    let mut best: Option<(f64, Vec<Ellipse>)> = None;
    for _ in 0..COVER_ATTEMPTS {
        let candidate: Vec<Ellipse> = (0..k).map(|_| draw_ellipse(rng)).collect();
        let mut union = vec![false; res * res];
        for e in &candidate {
            for (slot, inside) in union.iter_mut().zip(e.footprint(res)) {
                *slot |= inside;
            }
        }
        let frac = union.iter().filter(|&&b| b).count() as f64 / (res * res) as f64;
        if (COVER_LO..=COVER_HI).contains(&frac) {
            return candidate;
        }
        let dist = if frac < COVER_LO { COVER_LO - frac } else { frac - COVER_HI };
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, candidate));
        }
    }
    best.expect("at least one attempt").1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub id: usize,
    /// World-to-view 2x2 (row major) and translation, unit coordinates.
    pub affine: [[f64; 2]; 2],
    pub translation: [f64; 2],
    pub gains: [f64; 3],
    pub biases: [f64; 3],
    pub transients: Vec<Ellipse>,
}

impl ViewMeta {
    pub fn mat(&self) -> Mat2 {
        Mat2::new(self.affine[0][0], self.affine[0][1], self.affine[1][0], self.affine[1][1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub meta: ViewMeta,
    /// What the trainer sees: transients composited, illumination applied.
    pub image: Image,
    /// Same geometry, canonical illumination, no transients.
    pub clean: Image,
    /// 1 = transient pixel (exact footprint).
    pub mask_true: Image,
    /// 1 = stable pixel, after deliberate corruption.
    pub mask_prior: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema_version: u32,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub scene: Scene,
    pub views: Vec<SynthView>,
    pub heldout: Vec<SynthView>,
}

fn draw_affine(rng: &mut ChaCha8Rng) -> (Mat2, [f64; 2]) {
    let theta = rng.gen_range(-15.0f64..15.0).to_radians();
    let scale = rng.gen_range(0.9..1.1);
    let t = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let a = Mat2::rotation(theta).scale(scale);
    // Rotate/scale about the scene center, then shift.
    let c = [0.5, 0.5];
    let ac = a.matvec(c);
    (a, [c[0] - ac[0] + t[0], c[1] - ac[1] + t[1]])
}

/// Euclidean-disc dilation (grow = true) or erosion of a binary mask.
fn morph(mask: &[bool], res: usize, radius: i64, grow: bool) -> Vec<bool> {
    let mut out = vec![false; res * res];
    let r2 = radius * radius;
    for y in 0..res as i64 {
        for x in 0..res as i64 {
            let mut acc = !grow;
            'probe: for dy in -radius..=radius {
                for dx in -radius..=radius {
                    if dx * dx + dy * dy > r2 {
                        continue;
                    }
                    let yy = y + dy;
                    let xx = x + dx;
                    let v = if yy < 0 || xx < 0 || yy >= res as i64 || xx >= res as i64 {
                        false
                    } else {
                        mask[(yy * res as i64 + xx) as usize]
                    };
                    if grow && v {
                        acc = true;
                        break 'probe;
                    }
                    if !grow && !v {
                        acc = false;
                        break 'probe;
                    }
                }
            }
            out[(y * res as i64 + x) as usize] = acc;
        }
    }
    out
}

/// Corrupts a true transient mask the way an imperfect segmenter would:
/// boundary wobble (dilate or erode by <= 2 px), whole-region misses
/// (each ellipse dropped with probability 0.1), and an occasional spurious
/// region (probability 0.1). Empty masks stay empty.
fn corrupt_mask(
    true_union: &[bool],
    transients: &[Ellipse],
    res: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    if transients.is_empty() {
        return true_union.to_vec();
    }
    // Region flips first: rebuild the union from surviving ellipses.
    let mut kept = vec![false; res * res];
    for e in transients {
        let dropped = rng.gen::<f64>() < 0.1;
        if dropped {
            continue;
        }
        for (slot, inside) in kept.iter_mut().zip(e.footprint(res)) {
            *slot |= inside;
        }
    }
    // Boundary wobble.
    let radius = rng.gen_range(1..=2i64);
    let grow = rng.gen::<bool>();
    let mut corrupted = morph(&kept, res, radius, grow);
    // Spurious region: flags stable content as transient.
    if rng.gen::<f64>() < 0.1 {
        let spur = draw_ellipse(rng);
        for (slot, inside) in corrupted.iter_mut().zip(spur.footprint(res)) {
            *slot |= inside;
        }
    }
    corrupted
}

pub fn generate_views(seed: u64, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let scene = generate_scene(seed);
    let res = spec.resolution;
    let delta = spec.illumination.delta();

    let mut views = Vec::with_capacity(spec.num_views);
    for vi in 0..spec.num_views {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(view_stream(vi));
        let (affine, translation) = draw_affine(&mut rng);
        let clean = scene.render_through(&affine, translation, res);

        let k = spec.occlusion.draw_count(&mut rng);
        let transients = draw_transients(&mut rng, k, res);
        let mut union = vec![false; res * res];
        for e in &transients {
            for (slot, inside) in union.iter_mut().zip(e.footprint(res)) {
                *slot |= inside;
            }
        }

        let mut gains = [1.0; 3];
        let mut biases = [0.0; 3];
        for ch in 0..3 {
            gains[ch] = 1.0 + delta * (2.0 * rng.gen::<f64>() - 1.0);
            biases[ch] = 0.05 * delta * (2.0 * rng.gen::<f64>() - 1.0);
        }

        let image = Image::from_fn(res, res, 3, |y, x, ch| {
            let mut v = clean[(y, x, ch)];
            // Front-most listed ellipse wins where they overlap.
            for e in &transients {
                let u = [(x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64];
                if e.contains(u) {
                    v = e.color[ch];
                    break;
                }
            }
            (gains[ch] * v + biases[ch]).clamp(0.0, 1.0)
        });

        let mask_true =
            Image::from_fn(res, res, 1, |y, x, _| if union[y * res + x] { 1.0 } else { 0.0 });
        let corrupted = corrupt_mask(&union, &transients, res, &mut rng);
        let mask_prior =
            Image::from_fn(res, res, 1, |y, x, _| if corrupted[y * res + x] { 0.0 } else { 1.0 });

        views.push(SynthView {
            meta: ViewMeta {
                id: vi,
                affine: [[affine.m[0][0], affine.m[0][1]], [affine.m[1][0], affine.m[1][1]]],
                translation,
                gains,
                biases,
                transients,
            },
            image,
            clean,
            mask_true,
            mask_prior,
        });
    }

    let mut heldout = Vec::with_capacity(spec.num_heldout);
    for hi in 0..spec.num_heldout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(heldout_stream(hi));
        let (affine, translation) = draw_affine(&mut rng);
        let clean = scene.render_through(&affine, translation, res);
        heldout.push(SynthView {
            meta: ViewMeta {
                id: spec.num_views + hi,
                affine: [[affine.m[0][0], affine.m[0][1]], [affine.m[1][0], affine.m[1][1]]],
                translation,
                gains: [1.0; 3],
                biases: [0.0; 3],
                transients: Vec::new(),
            },
            image: clean.clone(),
            clean,
            mask_true: Image::from_fn(res, res, 1, |_, _, _| 0.0),
            mask_prior: Image::from_fn(res, res, 1, |_, _, _| 1.0),
        });
    }

    Ok(Dataset { schema_version: SCHEMA_VERSION, seed, spec: *spec, scene, views, heldout })
}

impl Dataset {
    /// Training views in the renderer's format.
    pub fn training_views(&self) -> Vec<View> {
        self.views
            .iter()
            .map(|v| View {
                id: view_stem(v.meta.id),
                affine: v.meta.mat(),
                translation: v.meta.translation,
                gt_image: v.image.clone(),
                prior_mask: v.mask_prior.clone(),
            })
            .collect()
    }

    /// Held-out clean views for evaluation.
    pub fn heldout_views(&self) -> Vec<View> {
        self.heldout
            .iter()
            .map(|v| View {
                id: view_stem(v.meta.id),
                affine: v.meta.mat(),
                translation: v.meta.translation,
                gt_image: v.clean.clone(),
                prior_mask: v.mask_prior.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    spec: DatasetSpec,
    scene: Scene,
    float_sidecars: bool,
    views: Vec<ViewMeta>,
    heldout: Vec<ViewMeta>,
}

fn view_stem(i: usize) -> String {
    format!("view_{i:03}")
}

pub fn write_dataset(ds: &Dataset, dir: &Path, float_sidecars: bool) -> Result<()> {
    for sub in ["views", "clean", "masks_true", "masks_prior"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    if float_sidecars {
        for sub in ["views_f64", "clean_f64"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
    }
    for v in ds.views.iter().chain(&ds.heldout) {
        let stem = view_stem(v.meta.id);
        v.image.save_png(&dir.join("views").join(format!("{stem}.png")))?;
        v.clean.save_png(&dir.join("clean").join(format!("{stem}.png")))?;
        v.mask_true.save_png(&dir.join("masks_true").join(format!("{stem}.png")))?;
        v.mask_prior.save_png(&dir.join("masks_prior").join(format!("{stem}.png")))?;
        if float_sidecars {
            v.image.save_f64(&dir.join("views_f64").join(format!("{stem}.if64")))?;
            v.clean.save_f64(&dir.join("clean_f64").join(format!("{stem}.if64")))?;
        }
    }
    let manifest = Manifest {
        schema_version: ds.schema_version,
        seed: ds.seed,
        spec: ds.spec,
        scene: ds.scene.clone(),
        float_sidecars,
        views: ds.views.iter().map(|v| v.meta.clone()).collect(),
        heldout: ds.heldout.iter().map(|v| v.meta.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invalid(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text)
        .map_err(|e| Error::io(dir.join("manifest.json"), e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| Error::IncompleteDataset {
        root: dir.into(),
        missing: "manifest.json".into(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupted {
        path: manifest_path.clone(),
        reason: format!("manifest parse error: {e}"),
    })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::DatasetVersion {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let load = |sub: &str, stem: &str, ext: &str| -> Result<Image> {
        let path = dir.join(sub).join(format!("{stem}.{ext}"));
        if !path.exists() {
            return Err(Error::IncompleteDataset {
                root: dir.into(),
                missing: format!("{sub}/{stem}.{ext}"),
            });
        }
        if ext == "if64" {
            Image::load_f64(&path)
        } else {
            Image::load_png(&path)
        }
    };
    let load_view = |meta: &ViewMeta| -> Result<SynthView> {
        let stem = view_stem(meta.id);
        let (image, clean) = if manifest.float_sidecars {
            (load("views_f64", &stem, "if64")?, load("clean_f64", &stem, "if64")?)
        } else {
            (load("views", &stem, "png")?, load("clean", &stem, "png")?)
        };
        Ok(SynthView {
            meta: meta.clone(),
            image,
            clean,
            mask_true: load("masks_true", &stem, "png")?,
            mask_prior: load("masks_prior", &stem, "png")?,
        })
    };
    let views: Vec<SynthView> = manifest.views.iter().map(&load_view).collect::<Result<_>>()?;
    let heldout: Vec<SynthView> =
        manifest.heldout.iter().map(&load_view).collect::<Result<_>>()?;
    Ok(Dataset {
        schema_version: manifest.schema_version,
        seed: manifest.seed,
        spec: manifest.spec,
        scene: manifest.scene,
        views,
        heldout,
    })
}

/// Dense reference cloud for renderer sanity checks: a `factor * res` grid
/// of small isotropic Gaussians colored by the scene. Renders the scene to
/// better than 30 dB, proving the representation can express the target.
pub fn oracle_cloud(scene: &Scene, res: usize, factor: usize) -> crate::cloud::GaussianCloud {
    let g = res * factor;
    let mut cloud = crate::cloud::GaussianCloud::default();
    let spacing = 1.0 / g as f64;
    // Overlapping neighbors average out to a smooth reconstruction.
    let scale = (0.7 * spacing).ln();
    for gy in 0..g {
        for gx in 0..g {
            let p = [(gx as f64 + 0.5) * spacing, (gy as f64 + 0.5) * spacing];
            let color = scene.sample(p);
            cloud.push(
                p,
                [scale, scale],
                0.0,
                crate::cloud::logit(0.9),
                color,
                ((gy * g + gx) % 97) as f64 / 97.0,
            );
        }
    }
    cloud
}
