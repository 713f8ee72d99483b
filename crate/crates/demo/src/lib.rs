//! WebAssembly bindings for the static page in `www/`. Each export renders
//! RGBA bytes or counts the page draws directly; the plain Rust functions
//! underneath are what the tests exercise.

use fdmixup::data::{generate_dataset, DomainDataset, DomainSpec, Image};
use fdmixup::mixup::{mix_queries, sample_lambda, LambdaStrategy};
use fdmixup::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const IMAGE_SIZE: usize = 32;
const GAP: usize = 2;

fn domain(name: &str, classes: usize, per_class: usize, seed: u64) -> fdmixup::Result<DomainDataset> {
    let spec = match name {
        "source" => DomainSpec::source(),
        "target" => DomainSpec::target(),
        other => return Err(fdmixup::Error::Invalid(format!("unknown domain `{other}`"))),
    };
    generate_dataset(
        &DomainSpec {
            image_size: IMAGE_SIZE,
            ..spec
        },
        classes,
        per_class,
        seed,
    )
}

/// Writes a `3×S×S` image into an RGBA canvas buffer of width `width` at
/// pixel offset `(x0, y0)`.
fn blit(canvas: &mut [u8], width: usize, x0: usize, y0: usize, planes: &[f64]) {
    let s = IMAGE_SIZE;
    for y in 0..s {
        for x in 0..s {
            let o = 4 * ((y0 + y) * width + x0 + x);
            for c in 0..3 {
                canvas[o + c] = (planes[c * s * s + y * s + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            canvas[o + 3] = 255;
        }
    }
}

fn grid_width(cols: usize) -> usize {
    cols * IMAGE_SIZE + (cols.saturating_sub(1)) * GAP
}

/// RGBA grid with one row per class and one column per image.
pub fn sample_grid(domain_name: &str, classes: usize, per_class: usize, seed: u64) -> fdmixup::Result<Vec<u8>> {
    let ds = domain(domain_name, classes, per_class, seed)?;
    let (w, h) = (grid_width(per_class), grid_width(classes));
    let mut canvas = vec![0u8; 4 * w * h];
    for (r, class) in ds.classes.iter().enumerate() {
        for (c, img) in class.images.iter().enumerate() {
            blit(
                &mut canvas,
                w,
                c * (IMAGE_SIZE + GAP),
                r * (IMAGE_SIZE + GAP),
                &img.pixels,
            );
        }
    }
    Ok(canvas)
}

fn as_tensor(img: &Image) -> fdmixup::Result<Tensor> {
    Tensor::new(vec![1, 3, IMAGE_SIZE, IMAGE_SIZE], img.pixels.to_vec())
}

/// Source image, mixed query and target image side by side.
pub fn mix_strip(source_class: usize, target_class: usize, lambda: f64, seed: u64) -> fdmixup::Result<Vec<u8>> {
    let classes = source_class.max(target_class) + 1;
    let classes = classes.max(2);
    let s = domain("source", classes, 2, seed)?;
    let t = domain("target", classes, 2, seed)?;
    let a = as_tensor(&s.classes[source_class].images[0])?;
    let b = as_tensor(&t.classes[target_class].images[0])?;
    let mixed = mix_queries(&a, &b, lambda)?;
    let w = grid_width(3);
    let mut canvas = vec![0u8; 4 * w * IMAGE_SIZE];
    for (i, planes) in [a.data(), mixed.data(), b.data()].into_iter().enumerate() {
        blit(&mut canvas, w, i * (IMAGE_SIZE + GAP), 0, planes);
    }
    Ok(canvas)
}

pub fn parse_strategy(name: &str) -> fdmixup::Result<LambdaStrategy> {
    match name {
        "plain" => Ok(LambdaStrategy::Plain),
        "v1" => Ok(LambdaStrategy::V1),
        "v2" => Ok(LambdaStrategy::V2),
        other => Err(fdmixup::Error::Invalid(format!("unknown strategy `{other}`"))),
    }
}

/// Counts of `draws` mixing ratios over `bins` equal-width bins of [0, 1].
pub fn lambda_histogram(alpha: f64, strategy: &str, draws: usize, bins: usize, seed: u64) -> fdmixup::Result<Vec<u32>> {
    if bins == 0 {
        return Err(fdmixup::Error::Invalid("bins must be positive".into()));
    }
    let strategy = parse_strategy(strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u32; bins];
    for _ in 0..draws {
        let l = sample_lambda(alpha, strategy, &mut rng)?;
        counts[((l * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(counts)
}

fn js(e: fdmixup::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = imageSize)]
pub fn image_size() -> usize {
    IMAGE_SIZE
}

#[wasm_bindgen(js_name = gridSide)]
pub fn grid_side(count: usize) -> usize {
    grid_width(count)
}

#[wasm_bindgen(js_name = sampleGrid)]
pub fn sample_grid_js(domain_name: &str, classes: usize, per_class: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    sample_grid(domain_name, classes, per_class, seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = mixStrip)]
pub fn mix_strip_js(source_class: usize, target_class: usize, lambda: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    mix_strip(source_class, target_class, lambda, seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = lambdaHistogram)]
pub fn lambda_histogram_js(
    alpha: f64,
    strategy: &str,
    draws: usize,
    bins: usize,
    seed: u32,
) -> Result<Vec<u32>, JsError> {
    lambda_histogram(alpha, strategy, draws, bins, seed.into()).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_one_tile_per_image() {
        let g = sample_grid("target", 3, 4, 1).unwrap();
        assert_eq!(g.len(), 4 * grid_width(4) * grid_width(3));
        assert!(sample_grid("elsewhere", 3, 4, 1).is_err());
    }

    #[test]
    fn mix_strip_endpoints_copy_the_parents() {
        let w = grid_width(3);
        let tile = |buf: &[u8], i: usize| -> Vec<u8> {
            (0..IMAGE_SIZE)
                .flat_map(|y| {
                    let o = 4 * (y * w + i * (IMAGE_SIZE + GAP));
                    buf[o..o + 4 * IMAGE_SIZE].to_vec()
                })
                .collect()
        };
        let one = mix_strip(0, 1, 1.0, 3).unwrap();
        assert_eq!(tile(&one, 1), tile(&one, 0));
        let zero = mix_strip(0, 1, 0.0, 3).unwrap();
        assert_eq!(tile(&zero, 1), tile(&zero, 2));
        assert!(mix_strip(0, 1, 1.5, 3).is_err());
    }

    #[test]
    fn histogram_respects_the_clamp() {
        let h = lambda_histogram(1.0, "v1", 2000, 10, 5).unwrap();
        assert_eq!(h.iter().sum::<u32>(), 2000);
        assert!(h[5..].iter().skip(1).all(|&c| c == 0));
        let h = lambda_histogram(1.0, "v2", 2000, 10, 5).unwrap();
        assert!(h[..5].iter().all(|&c| c == 0));
    }
}
