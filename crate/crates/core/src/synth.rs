//! Synthetic domain-shifted phantom generation, preprocessing and
//! augmentation.
//!
//! A sample's mask is a deformed ellipsoid blob determined only by the
//! shape seed; its image is the domain's intensity map applied to the mask
//! plus band-limited texture and white noise drawn from the domain seed.
//! Two domains therefore share the shape distribution exactly while
//! differing in appearance.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use crate::volume::{read_volume, write_volume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntensityMap {
    pub foreground: f32,
    pub background: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub intensity: IntensityMap,
    pub noise_sigma: f32,
    /// texture frequency in cycles per voxel
    pub texture_frequency: f32,
    pub spacing: (f32, f32, f32),
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Volume,
    pub mask: Volume,
    pub case_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub intensity_scale_range: (f32, f32),
    pub max_rotation_deg: f32,
    pub max_translation_vox: i32,
    pub rotate: bool,
    pub translate: bool,
    pub intensity: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            intensity_scale_range: (0.85, 1.15),
            max_rotation_deg: 20.0,
            max_translation_vox: 5,
            rotate: true,
            translate: true,
            intensity: true,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        AugmentSpec { rotate: false, translate: false, intensity: false, ..Default::default() }
    }
}

const FG_FRACTION_LO: f32 = 0.02;
const FG_FRACTION_HI: f32 = 0.20;

/// Generate one sample. The mask depends only on `(shape_seed, size)`, the
/// image additionally on the domain appearance parameters and seed.
pub fn generate_sample(
    shape_seed: u64,
    domain: &DomainSpec,
    size: (usize, usize, usize),
) -> Result<Sample> {
    if size.0 < 16 || size.1 < 16 || size.2 < 16 {
        return Err(CoreError::InvalidArgument(format!(
            "minimum sample size is 16^3, got {:?}",
            size
        )));
    }
    let mut mask = None;
    for attempt in 0..10u64 {
        let m = generate_mask(shape_seed.wrapping_add(attempt.wrapping_mul(0x9e3779b9)), size)?;
        let frac = m.foreground_fraction();
        if (FG_FRACTION_LO..=FG_FRACTION_HI).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        CoreError::Data(format!("degenerate mask for shape seed {} after 10 retries", shape_seed))
    })?;
    let mask = Volume::new(1, size, domain.spacing, mask.data().to_vec())?;
    let image = render_image(&mask, domain, shape_seed)?;
    Ok(Sample { image, mask, case_id: format!("case{:05}", shape_seed) })
}

fn generate_mask(shape_seed: u64, size: (usize, usize, usize)) -> Result<Volume> {
    let mut rng = derive_rng(shape_seed, "mask");
    let (d, h, w) = size;
    let center = [
        d as f32 * rng.gen_range(0.45..0.55),
        h as f32 * rng.gen_range(0.45..0.55),
        w as f32 * rng.gen_range(0.45..0.55),
    ];
    let radii = [
        d as f32 * rng.gen_range(0.20..0.30),
        h as f32 * rng.gen_range(0.20..0.30),
        w as f32 * rng.gen_range(0.20..0.30),
    ];
    // smooth low-frequency radial perturbation
    let nharm = 4;
    let mut freqs = Vec::with_capacity(nharm);
    let mut amps = Vec::with_capacity(nharm);
    let mut phases = Vec::with_capacity(nharm);
    for _ in 0..nharm {
        freqs.push([
            rng.gen_range(1..=2) as f32,
            rng.gen_range(1..=2) as f32,
            rng.gen_range(1..=2) as f32,
        ]);
        amps.push(rng.gen_range(0.015..0.05));
        phases.push(rng.gen_range(0.0..2.0 * PI));
    }
    let mut data = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f32, y as f32, x as f32];
                let rho = (((p[0] - center[0]) / radii[0]).powi(2)
                    + ((p[1] - center[1]) / radii[1]).powi(2)
                    + ((p[2] - center[2]) / radii[2]).powi(2))
                .sqrt();
                let mut pert = 0.0f32;
                for j in 0..nharm {
                    let arg = 2.0 * PI
                        * (freqs[j][0] * p[0] / d as f32
                            + freqs[j][1] * p[1] / h as f32
                            + freqs[j][2] * p[2] / w as f32)
                        + phases[j];
                    pert += amps[j] * arg.cos();
                }
                data[(z * h + y) * w + x] = if 1.0 - rho + pert > 0.0 { 1.0 } else { 0.0 };
            }
        }
    }
    let mut vol = Volume::new(1, size, (1.0, 1.0, 1.0), data)?;
    keep_largest_component(&mut vol);
    Ok(vol)
}

/// Zero all foreground voxels outside the largest 6-connected component.
fn keep_largest_component(v: &mut Volume) {
    let (d, h, w) = v.dims();
    let n = d * h * w;
    let mut label = vec![0u32; n];
    let mut best: (u32, usize) = (0, 0);
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..n {
        if v.data()[start] <= 0.5 || label[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        let mut count = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(i) = stack.pop() {
            count += 1;
            let z = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let mut push = |j: usize| {
                if v.data()[j] > 0.5 && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if z > 0 {
                push(i - h * w);
            }
            if z + 1 < d {
                push(i + h * w);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        if count > best.1 {
            best = (id, count);
        }
    }
    if best.0 != 0 {
        let spacing = v.spacing();
        let data: Vec<f32> = label
            .iter()
            .map(|&l| if l == best.0 { 1.0 } else { 0.0 })
            .collect();
        *v = Volume::new(1, (d, h, w), spacing, data).expect("component mask is valid");
    }
}

fn render_image(mask: &Volume, domain: &DomainSpec, shape_seed: u64) -> Result<Volume> {
    let (d, h, w) = mask.dims();
    let mut rng = derive_rng(
        domain.seed ^ shape_seed.wrapping_mul(0x9e3779b97f4a7c15),
        "image",
    );
    // band-limited texture: a handful of cosines with |f| near the domain
    // texture frequency (cycles/voxel)
    let ncos = 6;
    let mut tex = Vec::with_capacity(ncos);
    for _ in 0..ncos {
        let dir: [f32; 3] = {
            let v = [
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
            [v[0] / norm, v[1] / norm, v[2] / norm]
        };
        let f = domain.texture_frequency * rng.gen_range(0.7..1.3);
        let phase = rng.gen_range(0.0..2.0 * PI);
        tex.push(([dir[0] * f, dir[1] * f, dir[2] * f], phase));
    }
    // per-case appearance variation: each scan carries its own intensity
    // offsets and noise level around the domain nominal values; tied to
    // noise_sigma so a noiseless domain stays exactly two-level
    let fg = domain.intensity.foreground + rng.gen_range(-0.3..0.3) * domain.noise_sigma;
    let bg = domain.intensity.background + rng.gen_range(-0.3..0.3) * domain.noise_sigma;
    let amp = domain.noise_sigma * rng.gen_range(0.8..1.2);
    let mut data = vec![0.0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let base = if mask.data()[i] > 0.5 { fg } else { bg };
                let mut t = 0.0f32;
                for (f, phase) in &tex {
                    t += (2.0 * PI * (f[0] * z as f32 + f[1] * y as f32 + f[2] * x as f32)
                        + phase)
                        .cos();
                }
                t /= (ncos as f32).sqrt();
                let white: f32 = rng.gen_range(-1.732f32..1.732);
                data[i] = base + amp * (1.1 * t + 0.45 * white);
            }
        }
    }
    Volume::new(1, (d, h, w), domain.spacing, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

/// Resample to a uniform target spacing. Trilinear for images, nearest
/// neighbor for masks (binarity preserved).
pub fn resample_isotropic(v: &Volume, target_mm: f32, interp: Interp) -> Result<Volume> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(CoreError::InvalidArgument(format!("bad target spacing {}", target_mm)));
    }
    let (d, h, w) = v.dims();
    let (sz, sy, sx) = v.spacing();
    if (sz, sy, sx) == (target_mm, target_mm, target_mm) {
        return Ok(v.clone());
    }
    let nd = ((d as f32 * sz / target_mm).round() as usize).max(1);
    let nh = ((h as f32 * sy / target_mm).round() as usize).max(1);
    let nw = ((w as f32 * sx / target_mm).round() as usize).max(1);
    let c = v.channels();
    let mut out = Volume::zeros(c, (nd, nh, nw), (target_mm, target_mm, target_mm));
    for ch in 0..c {
        for z in 0..nd {
            let pz = ((z as f32 + 0.5) * target_mm) / sz - 0.5;
            for y in 0..nh {
                let py = ((y as f32 + 0.5) * target_mm) / sy - 0.5;
                for x in 0..nw {
                    let px = ((x as f32 + 0.5) * target_mm) / sx - 0.5;
                    let val = match interp {
                        Interp::Trilinear => sample_trilinear(v, ch, pz, py, px, true),
                        Interp::Nearest => sample_nearest(v, ch, pz, py, px, true),
                    };
                    out.set(ch, z, y, x, val);
                }
            }
        }
    }
    Ok(out)
}

fn sample_trilinear(v: &Volume, c: usize, z: f32, y: f32, x: f32, clamp_border: bool) -> f32 {
    let (d, h, w) = v.dims();
    if !clamp_border
        && (z < -0.5 || y < -0.5 || x < -0.5 || z > d as f32 - 0.5 || y > h as f32 - 0.5
            || x > w as f32 - 0.5)
    {
        return 0.0;
    }
    let z0 = z.floor();
    let y0 = y.floor();
    let x0 = x.floor();
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let cl = |i: f32, n: usize| (i.max(0.0) as usize).min(n - 1);
    let mut acc = 0.0f32;
    for (dz, wz) in [(0.0, 1.0 - fz), (1.0, fz)] {
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let weight = wz * wy * wx;
                if weight == 0.0 {
                    continue;
                }
                acc += weight * v.get(c, cl(z0 + dz, d), cl(y0 + dy, h), cl(x0 + dx, w));
            }
        }
    }
    acc
}

fn sample_nearest(v: &Volume, c: usize, z: f32, y: f32, x: f32, clamp_border: bool) -> f32 {
    let (d, h, w) = v.dims();
    let rz = z.round();
    let ry = y.round();
    let rx = x.round();
    if !clamp_border
        && (rz < 0.0 || ry < 0.0 || rx < 0.0 || rz >= d as f32 || ry >= h as f32 || rx >= w as f32)
    {
        return 0.0;
    }
    let cl = |i: f32, n: usize| (i.max(0.0) as usize).min(n - 1);
    v.get(c, cl(rz, d), cl(ry, h), cl(rx, w))
}

pub const CLIP_LO: f32 = -200.0;
pub const CLIP_HI: f32 = 400.0;

/// Clamp intensities to [-200, 400] and map that range linearly onto [-1, 1].
pub fn clip_normalize(v: &Volume) -> Result<Volume> {
    v.map(|x| {
        let c = x.clamp(CLIP_LO, CLIP_HI);
        (c - CLIP_LO) / (CLIP_HI - CLIP_LO) * 2.0 - 1.0
    })
}

/// Cube crop around the mask with the given margin. The cube side is the
/// largest mask extent plus twice the margin, clamped to the volume; the
/// same crop is applied to image and mask.
pub fn crop_bounding_cube(s: &Sample, margin_vox: usize) -> Result<Sample> {
    let cube = bounding_cube(&s.mask, margin_vox)?;
    Ok(Sample {
        image: crop(&s.image, cube)?,
        mask: crop(&s.mask, cube)?,
        case_id: s.case_id.clone(),
    })
}

/// (z0, y0, x0, side) of the bounding cube for a binary mask.
pub fn bounding_cube(mask: &Volume, margin_vox: usize) -> Result<(usize, usize, usize, usize)> {
    let (d, h, w) = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(0, z, y, x) > 0.5 {
                    lo[0] = lo[0].min(z);
                    lo[1] = lo[1].min(y);
                    lo[2] = lo[2].min(x);
                    hi[0] = hi[0].max(z);
                    hi[1] = hi[1].max(y);
                    hi[2] = hi[2].max(x);
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(CoreError::Data("bounding cube of an empty mask".into()));
    }
    let extents = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let max_extent = extents.into_iter().max().unwrap();
    let side = (max_extent + 2 * margin_vox).min(d.min(h).min(w));
    let dims = [d, h, w];
    let mut origin = [0usize; 3];
    for a in 0..3 {
        // center the cube on the mask bbox, shifted to stay in bounds
        let center2 = lo[a] + hi[a] + 1; // 2 * bbox center
        let start = (center2 as isize - side as isize) / 2;
        origin[a] = start.clamp(0, dims[a] as isize - side as isize) as usize;
    }
    Ok((origin[0], origin[1], origin[2], side))
}

fn crop(v: &Volume, cube: (usize, usize, usize, usize)) -> Result<Volume> {
    let (z0, y0, x0, side) = cube;
    let c = v.channels();
    let mut out = Volume::zeros(c, (side, side, side), v.spacing());
    for ch in 0..c {
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    out.set(ch, z, y, x, v.get(ch, z0 + z, y0 + y, x0 + x));
                }
            }
        }
    }
    Ok(out)
}

/// Rigid transform parameters drawn by [`augment`]; exposed so tests can
/// apply a known transform directly.
#[derive(Debug, Clone)]
pub struct TransformParams {
    pub axis: [f32; 3],
    pub angle_deg: f32,
    pub translation: [i32; 3],
    pub intensity_scale: f32,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            axis: [1.0, 0.0, 0.0],
            angle_deg: 0.0,
            translation: [0, 0, 0],
            intensity_scale: 1.0,
        }
    }
}

/// Random rotation (≤ max degrees, random axis), integer translation and
/// multiplicative intensity scale on the image only; the identical
/// geometric transform is applied to the mask with nearest-neighbor
/// resampling and zero fill.
pub fn augment(s: &Sample, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let mut p = TransformParams::identity();
    if spec.rotate {
        let v = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
        p.axis = [v[0] / norm, v[1] / norm, v[2] / norm];
        p.angle_deg = rng.gen_range(-spec.max_rotation_deg..=spec.max_rotation_deg);
    }
    if spec.translate {
        let t = spec.max_translation_vox;
        p.translation = [
            rng.gen_range(-t..=t),
            rng.gen_range(-t..=t),
            rng.gen_range(-t..=t),
        ];
    }
    if spec.intensity {
        p.intensity_scale =
            rng.gen_range(spec.intensity_scale_range.0..=spec.intensity_scale_range.1);
    }
    transform_sample(s, &p)
}

pub fn transform_sample(s: &Sample, p: &TransformParams) -> Result<Sample> {
    let image = transform_volume(&s.image, p, Interp::Trilinear)?;
    let image = image.map(|v| v * p.intensity_scale)?;
    let mask = transform_volume(&s.mask, p, Interp::Nearest)?;
    Ok(Sample { image, mask, case_id: s.case_id.clone() })
}

fn rotation_matrix(axis: [f32; 3], angle_deg: f32) -> [[f32; 3]; 3] {
    let th = angle_deg.to_radians();
    let (s, c) = th.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn transform_volume(v: &Volume, p: &TransformParams, interp: Interp) -> Result<Volume> {
    let identity_rot = p.angle_deg == 0.0;
    let (d, h, w) = v.dims();
    let c = v.channels();
    // inverse mapping: rotate by -angle about the center, then untranslate
    let rot = rotation_matrix(p.axis, -p.angle_deg);
    let center = [
        (d as f32 - 1.0) / 2.0,
        (h as f32 - 1.0) / 2.0,
        (w as f32 - 1.0) / 2.0,
    ];
    let mut out = Volume::zeros(c, (d, h, w), v.spacing());
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let q = [
                        z as f32 - p.translation[0] as f32 - center[0],
                        y as f32 - p.translation[1] as f32 - center[1],
                        x as f32 - p.translation[2] as f32 - center[2],
                    ];
                    let src = if identity_rot {
                        [q[0] + center[0], q[1] + center[1], q[2] + center[2]]
                    } else {
                        [
                            rot[0][0] * q[0] + rot[0][1] * q[1] + rot[0][2] * q[2] + center[0],
                            rot[1][0] * q[0] + rot[1][1] * q[1] + rot[1][2] * q[2] + center[1],
                            rot[2][0] * q[0] + rot[2][1] * q[1] + rot[2][2] * q[2] + center[2],
                        ]
                    };
                    let inside = src[0] >= -0.5
                        && src[0] <= d as f32 - 0.5
                        && src[1] >= -0.5
                        && src[1] <= h as f32 - 0.5
                        && src[2] >= -0.5
                        && src[2] <= w as f32 - 0.5;
                    let val = if !inside {
                        0.0
                    } else {
                        match interp {
                            Interp::Trilinear => sample_trilinear(v, ch, src[0], src[1], src[2], true),
                            Interp::Nearest => sample_nearest(v, ch, src[0], src[1], src[2], true),
                        }
                    };
                    out.set(ch, z, y, x, val);
                }
            }
        }
    }
    Ok(out)
}

// ---- dataset directory layout ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub shape_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: DomainSpec,
    pub with_masks: bool,
    pub cases: Vec<CaseRecord>,
}

/// Generate `count` samples for a domain under `<root>/<domain-name>/`.
/// Shape seeds run from `shape_seed_base`; the on-disk layout is
/// `<case>.img.vuda` (+ `<case>.msk.vuda` when labeled) plus
/// `manifest.json`.
pub fn generate_dataset(
    root: &Path,
    domain: &DomainSpec,
    shape_seed_base: u64,
    count: usize,
    size: (usize, usize, usize),
    with_masks: bool,
) -> Result<DatasetManifest> {
    let dir = root.join(&domain.name);
    fs::create_dir_all(&dir)?;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let shape_seed = shape_seed_base + i as u64;
        let s = generate_sample(shape_seed, domain, size)?;
        let s = Sample { image: clip_normalize(&s.image)?, ..s };
        write_volume(dir.join(format!("{}.img.vuda", s.case_id)), &s.image)?;
        if with_masks {
            write_volume(dir.join(format!("{}.msk.vuda", s.case_id)), &s.mask)?;
        }
        cases.push(CaseRecord { case_id: s.case_id, shape_seed });
    }
    let manifest = DatasetManifest { domain: domain.clone(), with_masks, cases };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Data(format!("manifest serialization: {}", e)))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path, domain_name: &str) -> Result<DatasetManifest> {
    let path = root.join(domain_name).join("manifest.json");
    let json = fs::read_to_string(&path)?;
    serde_json::from_str(&json).map_err(|e| CoreError::Data(format!("bad manifest {:?}: {}", path, e)))
}

/// Load labeled samples for a domain.
pub fn load_dataset(root: &Path, domain_name: &str) -> Result<Vec<Sample>> {
    let manifest = load_manifest(root, domain_name)?;
    if !manifest.with_masks {
        return Err(CoreError::Data(format!("domain '{}' has no masks on disk", domain_name)));
    }
    let dir = root.join(domain_name);
    manifest
        .cases
        .iter()
        .map(|c| {
            Ok(Sample {
                image: read_volume(dir.join(format!("{}.img.vuda", c.case_id)))?,
                mask: read_volume(dir.join(format!("{}.msk.vuda", c.case_id)))?,
                case_id: c.case_id.clone(),
            })
        })
        .collect()
}

/// Load images only (the unlabeled target protocol).
pub fn load_images(root: &Path, domain_name: &str) -> Result<Vec<(String, Volume)>> {
    let manifest = load_manifest(root, domain_name)?;
    let dir = root.join(domain_name);
    manifest
        .cases
        .iter()
        .map(|c| {
            Ok((
                c.case_id.clone(),
                read_volume(dir.join(format!("{}.img.vuda", c.case_id)))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain(name: &str, fg: f32, bg: f32, sigma: f32, seed: u64) -> DomainSpec {
        DomainSpec {
            name: name.into(),
            intensity: IntensityMap { foreground: fg, background: bg },
            noise_sigma: sigma,
            texture_frequency: 0.3,
            spacing: (1.0, 1.0, 1.0),
            seed,
        }
    }

    #[test]
    fn masks_are_domain_invariant_bitwise() {
        let a = domain("a", 100.0, -50.0, 25.0, 11);
        let b = domain("b", 250.0, 10.0, 60.0, 99);
        let sa = generate_sample(42, &a, (16, 16, 16)).unwrap();
        let sb = generate_sample(42, &b, (16, 16, 16)).unwrap();
        let ma: Vec<u32> = sa.mask.data().iter().map(|v| v.to_bits()).collect();
        let mb: Vec<u32> = sb.mask.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ma, mb);
        assert_ne!(sa.image.data(), sb.image.data());
    }

    #[test]
    fn zero_noise_flat_intensities_give_two_mask_minus_one() {
        let d = domain("flat", 1.0, -1.0, 0.0, 5);
        let s = generate_sample(7, &d, (16, 16, 16)).unwrap();
        for (img, m) in s.image.data().iter().zip(s.mask.data().iter()) {
            assert_eq!(*img, 2.0 * m - 1.0);
        }
    }

    #[test]
    fn mask_foreground_fraction_stays_in_contract_range() {
        let d = domain("frac", 1.0, 0.0, 0.0, 1);
        for shape_seed in 0..200u64 {
            let s = generate_sample(shape_seed, &d, (16, 16, 16)).unwrap();
            let f = s.mask.foreground_fraction();
            assert!((0.02..=0.20).contains(&f), "seed {} fraction {}", shape_seed, f);
            assert!(s.mask.is_binary());
        }
    }

    #[test]
    fn resample_at_native_spacing_is_identity() {
        let d = domain("id", 1.0, -1.0, 10.0, 3);
        let s = generate_sample(3, &d, (16, 16, 16)).unwrap();
        let r = resample_isotropic(&s.image, 1.0, Interp::Trilinear).unwrap();
        assert_eq!(r.data(), s.image.data());
    }

    #[test]
    fn resample_doubles_depth_and_matches_trilinear_oracle() {
        // spacing (2,1,1) 8^3 -> 1mm iso: depth 16, rows/cols unchanged
        let mut v = Volume::zeros(1, (8, 8, 8), (2.0, 1.0, 1.0));
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    v.set(0, z, y, x, z as f32 * 1.5 + y as f32 * 0.25 - x as f32 * 0.5);
                }
            }
        }
        let r = resample_isotropic(&v, 1.0, Interp::Trilinear).unwrap();
        assert_eq!(r.dims(), (16, 8, 8));
        assert_eq!(r.spacing(), (1.0, 1.0, 1.0));
        // hand oracle: output voxel z maps to source depth (z+0.5)/2-0.5,
        // linear field so interpolation is exact away from clamped borders
        for z in 1..15 {
            let src_z = (z as f32 + 0.5) / 2.0 - 0.5;
            let expect = src_z * 1.5 + 3.0 * 0.25 - 2.0 * 0.5;
            assert!((r.get(0, z, 3, 2) - expect).abs() <= 1e-5, "z={}", z);
        }
    }

    #[test]
    fn resample_keeps_masks_binary() {
        let d = domain("bin", 1.0, 0.0, 0.0, 9);
        let s = generate_sample(9, &d, (16, 16, 16)).unwrap();
        let m = Volume::new(1, (16, 16, 16), (1.7, 1.0, 1.0), s.mask.data().to_vec()).unwrap();
        let r = resample_isotropic(&m, 1.0, Interp::Nearest).unwrap();
        assert!(r.is_binary());
    }

    #[test]
    fn clip_normalize_anchor_points() {
        let v = Volume::new(1, (1, 1, 4), (1.0, 1.0, 1.0), vec![-200.0, 400.0, 100.0, -999.0]).unwrap();
        let r = clip_normalize(&v).unwrap();
        assert_eq!(r.get(0, 0, 0, 0), -1.0);
        assert_eq!(r.get(0, 0, 0, 1), 1.0);
        assert_eq!(r.get(0, 0, 0, 2), 0.0);
        assert_eq!(r.get(0, 0, 0, 3), -1.0); // clipped below
        assert!(r.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn crop_single_center_voxel_margin_four_gives_nine_cube() {
        let mut mask = Volume::zeros(1, (21, 21, 21), (1.0, 1.0, 1.0));
        mask.set(0, 10, 10, 10, 1.0);
        let cube = bounding_cube(&mask, 4).unwrap();
        assert_eq!(cube, (6, 6, 6, 9));
    }

    #[test]
    fn crop_side_follows_max_extent_rule() {
        // extents (5,3,7), margin 2 -> side 7 + 4 = 11
        let mut mask = Volume::zeros(1, (32, 32, 32), (1.0, 1.0, 1.0));
        for z in 10..15 {
            for y in 10..13 {
                for x in 10..17 {
                    mask.set(0, z, y, x, 1.0);
                }
            }
        }
        let (_, _, _, side) = bounding_cube(&mask, 2).unwrap();
        assert_eq!(side, 11);
    }

    #[test]
    fn crop_of_full_mask_is_identity() {
        let d = domain("full", 1.0, 0.0, 0.0, 2);
        let mut s = generate_sample(2, &d, (16, 16, 16)).unwrap();
        s.mask = s.mask.map(|_| 1.0).unwrap();
        let c = crop_bounding_cube(&s, 3).unwrap();
        assert_eq!(c.image.dims(), (16, 16, 16));
        assert_eq!(c.image.data(), s.image.data());
    }

    #[test]
    fn disabled_augment_is_identity() {
        let d = domain("aug", 1.0, -1.0, 15.0, 4);
        let s = generate_sample(4, &d, (16, 16, 16)).unwrap();
        let mut rng = crate::rng::derive_rng(0, "aug-test");
        let a = augment(&s, &AugmentSpec::disabled(), &mut rng).unwrap();
        assert_eq!(a.image.data(), s.image.data());
        assert_eq!(a.mask.data(), s.mask.data());
    }

    #[test]
    fn unit_translation_shifts_with_zero_fill() {
        let d = domain("shift", 1.0, -1.0, 0.0, 6);
        let s = generate_sample(6, &d, (16, 16, 16)).unwrap();
        let p = TransformParams { translation: [0, 0, 1], ..TransformParams::identity() };
        let t = transform_sample(&s, &p).unwrap();
        for z in 0..16 {
            for y in 0..16 {
                assert_eq!(t.image.get(0, z, y, 0), 0.0); // zero-filled border
                for x in 1..16 {
                    assert_eq!(t.image.get(0, z, y, x), s.image.get(0, z, y, x - 1));
                    assert_eq!(t.mask.get(0, z, y, x), s.mask.get(0, z, y, x - 1));
                }
            }
        }
    }

    #[test]
    fn intensity_scale_touches_image_only() {
        let d = domain("int", 0.5, 0.5, 0.0, 8);
        let s = generate_sample(8, &d, (16, 16, 16)).unwrap();
        let p = TransformParams { intensity_scale: 1.15, ..TransformParams::identity() };
        let t = transform_sample(&s, &p).unwrap();
        for v in t.image.data() {
            assert!((v - 0.575).abs() <= 1e-6);
        }
        assert_eq!(t.mask.data(), s.mask.data());
    }

    fn centroid(v: &Volume) -> [f32; 3] {
        let (d, h, w) = v.dims();
        let mut acc = [0.0f32; 3];
        let mut n = 0.0f32;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if v.get(0, z, y, x) > 0.5 {
                        acc[0] += z as f32;
                        acc[1] += y as f32;
                        acc[2] += x as f32;
                        n += 1.0;
                    }
                }
            }
        }
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    #[test]
    fn rotation_keeps_image_and_mask_aligned() {
        let d = domain("rot", 1.0, 0.0, 0.0, 12);
        // noise-free fg-1/bg-0 image equals the mask, so the two centroids
        // measure the same geometric transform through the two interpolators
        for shape_seed in [12u64, 13, 14, 15] {
            let s = generate_sample(shape_seed, &d, (16, 16, 16)).unwrap();
            let p = TransformParams {
                axis: [0.6, 0.64, 0.48],
                angle_deg: 17.0,
                ..TransformParams::identity()
            };
            let t = transform_sample(&s, &p).unwrap();
            assert!(t.mask.is_binary());
            let img_bin = t.image.map(|v| if v > 0.5 { 1.0 } else { 0.0 }).unwrap();
            let ci = centroid(&img_bin);
            let cm = centroid(&t.mask);
            let dist = ((ci[0] - cm[0]).powi(2) + (ci[1] - cm[1]).powi(2) + (ci[2] - cm[2]).powi(2)).sqrt();
            assert!(dist <= 0.75, "seed {} centroid drift {}", shape_seed, dist);
        }
    }

    #[test]
    fn dataset_round_trip_through_directory_layout() {
        let d = domain("src", 90.0, -70.0, 20.0, 21);
        let root = std::env::temp_dir().join(format!("vuda-ds-{}", std::process::id()));
        let manifest = generate_dataset(&root, &d, 100, 3, (16, 16, 16), true).unwrap();
        assert_eq!(manifest.cases.len(), 3);
        let samples = load_dataset(&root, "src").unwrap();
        assert_eq!(samples.len(), 3);
        assert!(samples.iter().all(|s| s.mask.is_binary()));
        let images = load_images(&root, "src").unwrap();
        assert_eq!(images[0].0, samples[0].case_id);
        assert_eq!(images[0].1.data(), samples[0].image.data());
        std::fs::remove_dir_all(&root).ok();
    }
}
