use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassRecord, DomainDataset, DomainId, Image, ImageId};
use crate::error::{Error, Result};
use crate::rng;

/// Appearance and pattern parameters of one synthetic domain.
///
/// A class is a constellation of coloured shapes; each image of the class
/// jitters the constellation. The domain style (channel remap, contrast,
/// brightness and an oriented stripe texture with random phase) is applied
/// on top of the rendered pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain: DomainId,
    pub image_size: usize,
    /// Added to the class index to form a globally unique class id.
    pub class_id_offset: u32,
    pub shapes_per_class: usize,
    /// Leading shapes shared by every class of the domain.
    pub shared_shapes: usize,
    pub position_jitter: f64,
    pub size_jitter: f64,
    pub color_jitter: f64,
    pub pixel_noise: f64,
    /// Random shapes per image that carry no class information.
    pub distractors: usize,
    /// Blend of rendered colours with their grey level; 1 keeps full colour.
    pub saturation: f64,
    pub background: [f64; 3],
    /// Output channel `c` reads rendered channel `channel_map[c]`.
    pub channel_map: [usize; 3],
    pub contrast: f64,
    pub brightness: f64,
    pub texture_amplitude: f64,
    pub texture_period: f64,
    pub texture_angle: f64,
    /// Separates the pattern families of different domains.
    pub pattern_salt: u64,
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            domain: DomainId::Source,
            image_size: 32,
            class_id_offset: 0,
            shapes_per_class: 3,
            shared_shapes: 0,
            position_jitter: 3.0,
            size_jitter: 0.25,
            color_jitter: 0.15,
            pixel_noise: 0.08,
            distractors: 2,
            saturation: 1.0,
            background: [0.12, 0.12, 0.12],
            channel_map: [0, 1, 2],
            contrast: 1.0,
            brightness: 0.0,
            texture_amplitude: 0.0,
            texture_period: 4.0,
            texture_angle: 0.0,
            pattern_salt: 11,
        }
    }

    pub fn target() -> Self {
        DomainSpec {
            domain: DomainId::Target,
            class_id_offset: 10_000,
            shared_shapes: 1,
            saturation: 0.2,
            channel_map: [2, 0, 1],
            contrast: 0.6,
            brightness: 0.12,
            texture_amplitude: 0.18,
            texture_period: 4.0,
            texture_angle: std::f64::consts::FRAC_PI_4,
            pattern_salt: 23,
            ..DomainSpec::source()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::data("image_size must be at least 8"));
        }
        if self.shapes_per_class == 0 || self.shared_shapes >= self.shapes_per_class {
            return Err(Error::data("need at least one class-specific shape"));
        }
        if self.channel_map.iter().any(|&c| c > 2) {
            return Err(Error::data("channel_map entries must be 0..3"));
        }
        if !(0.0..=1.0).contains(&self.saturation) {
            return Err(Error::data("saturation must lie in [0, 1]"));
        }
        if self.texture_period <= 0.0 {
            return Err(Error::data("texture_period must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disk,
    Square,
    Ring,
    HBar,
    VBar,
    Cross,
}

const KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Ring,
    ShapeKind::HBar,
    ShapeKind::VBar,
    ShapeKind::Cross,
];

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

impl Shape {
    fn random(rng: &mut impl Rng, size: f64) -> Self {
        let margin = size * 0.2;
        Shape {
            kind: KINDS[rng.gen_range(0..KINDS.len())],
            cx: rng.gen_range(margin..size - margin),
            cy: rng.gen_range(margin..size - margin),
            radius: rng.gen_range(size * 0.09..size * 0.19),
            color: [
                rng.gen_range(0.25..1.0),
                rng.gen_range(0.25..1.0),
                rng.gen_range(0.25..1.0),
            ],
        }
    }

    /// Fraction of the pixel centred at `(x, y)` covered by the shape, with a
    /// one-pixel soft edge.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        let edge = |d: f64| (0.5 - d).clamp(0.0, 1.0);
        match self.kind {
            ShapeKind::Disk => edge((dx * dx + dy * dy).sqrt() - r),
            ShapeKind::Square => edge(dx.abs().max(dy.abs()) - 0.8 * r),
            ShapeKind::Ring => edge(((dx * dx + dy * dy).sqrt() - r).abs() - 1.0),
            ShapeKind::HBar => edge((dx.abs() - r).max(dy.abs() - 0.3 * r)),
            ShapeKind::VBar => edge((dy.abs() - r).max(dx.abs() - 0.3 * r)),
            ShapeKind::Cross => {
                edge((dx.abs() - r).max(dy.abs() - 0.25 * r)).max(edge((dy.abs() - r).max(dx.abs() - 0.25 * r)))
            }
        }
    }
}

fn class_pattern(spec: &DomainSpec, seed: u64, class: usize) -> Vec<Shape> {
    let size = spec.image_size as f64;
    let mut shared = rng::stream(seed, &[spec.pattern_salt, u64::MAX]);
    let mut own = rng::stream(seed, &[spec.pattern_salt, class as u64]);
    (0..spec.shapes_per_class)
        .map(|i| {
            if i < spec.shared_shapes {
                Shape::random(&mut shared, size)
            } else {
                Shape::random(&mut own, size)
            }
        })
        .collect()
}

fn render(spec: &DomainSpec, pattern: &[Shape], rng: &mut impl Rng) -> Vec<f64> {
    let s = spec.image_size;
    let plane = s * s;
    let mut raw = vec![0.0; 3 * plane];
    let bg_shift: f64 = rng.gen_range(-0.04..0.04);
    for c in 0..3 {
        raw[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|p| *p = spec.background[c] + bg_shift);
    }
    let extra: Vec<Shape> = (0..spec.distractors).map(|_| Shape::random(rng, s as f64)).collect();
    for base in pattern.iter().chain(&extra) {
        let sh = Shape {
            kind: base.kind,
            cx: base.cx + rng.gen_range(-spec.position_jitter..=spec.position_jitter),
            cy: base.cy + rng.gen_range(-spec.position_jitter..=spec.position_jitter),
            radius: base.radius * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter)),
            color: base
                .color
                .map(|v| (v + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0)),
        };
        for y in 0..s {
            for x in 0..s {
                let cov = sh.coverage(x as f64 + 0.5, y as f64 + 0.5);
                if cov > 0.0 {
                    for c in 0..3 {
                        let p = &mut raw[c * plane + y * s + x];
                        *p = *p * (1.0 - cov) + sh.color[c] * cov;
                    }
                }
            }
        }
    }
    if spec.saturation < 1.0 {
        for i in 0..plane {
            let grey = (raw[i] + raw[plane + i] + raw[2 * plane + i]) / 3.0;
            for c in 0..3 {
                let p = &mut raw[c * plane + i];
                *p = grey + spec.saturation * (*p - grey);
            }
        }
    }
    if spec.pixel_noise > 0.0 {
        for p in raw.iter_mut() {
            // Sum of uniforms: cheap, bounded, roughly Gaussian.
            let u: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum();
            *p += spec.pixel_noise * u;
        }
    }
    let phase = rng.gen_range(0.0..TAU);
    let (ca, sa) = (spec.texture_angle.cos(), spec.texture_angle.sin());
    let mut out = vec![0.0; 3 * plane];
    for c in 0..3 {
        let src = spec.channel_map[c] * plane;
        for y in 0..s {
            for x in 0..s {
                let tex = if spec.texture_amplitude > 0.0 {
                    let t = (x as f64 * ca + y as f64 * sa) / spec.texture_period;
                    spec.texture_amplitude * (TAU * t + phase).sin()
                } else {
                    0.0
                };
                let v = spec.contrast * (raw[src + y * s + x] - 0.5) + 0.5 + spec.brightness + tex;
                out[c * plane + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Renders `num_classes × images_per_class` images. The result is a pure
/// function of `(spec, seed)`.
pub fn generate_dataset(
    spec: &DomainSpec,
    num_classes: usize,
    images_per_class: usize,
    seed: u64,
) -> Result<DomainDataset> {
    spec.validate()?;
    if num_classes < 2 {
        return Err(Error::data(format!("need at least 2 classes, got {num_classes}")));
    }
    if images_per_class < 2 {
        return Err(Error::data(format!(
            "need at least 2 images per class, got {images_per_class}"
        )));
    }
    let classes = (0..num_classes)
        .map(|c| {
            let pattern = class_pattern(spec, seed, c);
            let class_id = spec.class_id_offset + c as u32;
            let images = (0..images_per_class)
                .map(|i| {
                    let mut r = rng::stream(seed, &[spec.pattern_salt, c as u64, i as u64, 0xda7a]);
                    Image {
                        id: ImageId {
                            class_id,
                            index: i as u32,
                        },
                        domain: spec.domain,
                        pixels: Arc::from(render(spec, &pattern, &mut r)),
                    }
                })
                .collect();
            ClassRecord { class_id, images }
        })
        .collect();
    Ok(DomainDataset {
        domain: spec.domain,
        image_size: spec.image_size,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_means(ds: &DomainDataset) -> [f64; 3] {
        let plane = ds.image_size * ds.image_size;
        let mut m = [0.0; 3];
        for img in ds.images() {
            for (c, v) in m.iter_mut().enumerate() {
                *v += img.pixels[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
            }
        }
        m.map(|v| v / ds.num_images() as f64)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&DomainSpec::source(), 40, 30, 7).unwrap();
        let b = generate_dataset(&DomainSpec::source(), 40, 30, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_dataset(&DomainSpec::source(), 2, 2, 1).unwrap();
        let b = generate_dataset(&DomainSpec::source(), 2, 2, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn target_style_shifts_channel_means() {
        let s = generate_dataset(&DomainSpec::source(), 10, 10, 7).unwrap();
        let t = generate_dataset(&DomainSpec::target(), 10, 10, 7).unwrap();
        let (ms, mt) = (channel_means(&s), channel_means(&t));
        let gap = ms.iter().zip(&mt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap > 0.05, "channel mean gap {gap}: {ms:?} vs {mt:?}");
        t.validate().unwrap();
    }

    #[test]
    fn class_ids_are_disjoint_across_default_domains() {
        let s = generate_dataset(&DomainSpec::source(), 40, 2, 7).unwrap();
        let t = generate_dataset(&DomainSpec::target(), 22, 2, 7).unwrap();
        let ids = s.class_ids();
        assert!(t.class_ids().iter().all(|c| !ids.contains(c)));
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        assert!(generate_dataset(&DomainSpec::source(), 1, 30, 7).is_err());
        assert!(generate_dataset(&DomainSpec::source(), 5, 1, 7).is_err());
    }
}
