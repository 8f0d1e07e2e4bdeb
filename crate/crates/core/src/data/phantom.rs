//! Synthetic multi-parameter cases.
//!
//! Three latent fields drive each case: `A` (smooth blobs, shared anatomy),
//! and `B`, `C` (independent smoothed noise). The inputs mix them as
//!
//! ```text
//! p1 = A
//! p2 = clip(0.6·A + 0.4·B)
//! p3 = clip(0.6·A + 0.4·C)
//! y  = clip(0.3·(1 − A) + 0.35·B + 0.35·C)
//! ```
//!
//! so the target is recoverable from all three inputs but not from any
//! proper subset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STREAM_A: u64 = 1;
const STREAM_B: u64 = 2;
const STREAM_C: u64 = 3;

/// Latent fields of one case, each `size × size`, row-major, in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFields {
    pub size: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub seed: u64,
    pub p1: Tensor<f32>,
    pub p2: Tensor<f32>,
    pub p3: Tensor<f32>,
    pub y: Tensor<f32>,
}

impl CaseRecord {
    /// Input image by name (`"p1"`, `"p2"`, `"p3"`).
    pub fn input(&self, name: &str) -> Result<&Tensor<f32>> {
        match name {
            "p1" => Ok(&self.p1),
            "p2" => Ok(&self.p2),
            "p3" => Ok(&self.p3),
            other => Err(Error::config(format!("unknown input parameter {other:?}"))),
        }
    }
}

/// Normalized 1-D Gaussian truncated at radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let clamp = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            tmp[i * size + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * field[i * size + clamp(j as i64 + t as i64 - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            out[i * size + j] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp(i as i64 + t as i64 - r) * size + j])
                .sum();
        }
    }
    out
}

/// Rescales to [0, 1]; a constant field maps to all zeros.
pub fn min_max_normalize(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn ellipse_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let count = rng.random_range(3..=6);
    let mut field = vec![0.0; size * size];
    for _ in 0..count {
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let ax = rng.random_range(s / 10.0..=s / 4.0);
        let ay = rng.random_range(s / 10.0..=s / 4.0);
        let theta = rng.random_range(0.0..PI);
        let intensity = rng.random_range(0.2..=1.0);
        let (sin, cos) = theta.sin_cos();
        for i in 0..size {
            for j in 0..size {
                let dx = j as f64 + 0.5 - cx;
                let dy = i as f64 + 0.5 - cy;
                let u = (dx * cos + dy * sin) / ax;
                let v = (-dx * sin + dy * cos) / ay;
                if u * u + v * v <= 1.0 {
                    field[i * size + j] += intensity;
                }
            }
        }
    }
    field
}

fn noise_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>()).collect();
    let mut f = gaussian_blur(&white, size, size as f64 / 8.0);
    min_max_normalize(&mut f);
    f
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || size % 16 != 0 {
        return Err(Error::config(format!(
            "phantom size must be a positive multiple of 16, got {size}"
        )));
    }
    Ok(())
}

/// Latents for `seed`; A, B and C come from disjoint PRNG streams.
pub fn generate_latents(seed: u64, size: usize) -> Result<LatentFields> {
    check_size(size)?;
    let mut a = gaussian_blur(&ellipse_field(&mut substream(seed, STREAM_A), size), size, size as f64 / 16.0);
    min_max_normalize(&mut a);
    let b = noise_field(&mut substream(seed, STREAM_B), size);
    let c = noise_field(&mut substream(seed, STREAM_C), size);
    Ok(LatentFields { size, a, b, c })
}

/// Applies the fixed mixing formulas to a set of latents.
pub fn compose_case(id: impl Into<String>, seed: u64, latents: &LatentFields) -> Result<CaseRecord> {
    let n = latents.size;
    if [latents.a.len(), latents.b.len(), latents.c.len()] != [n * n; 3] {
        return Err(Error::contract("latent fields do not match the declared size"));
    }
    let clip = |v: f64| v.clamp(0.0, 1.0);
    let image = |f: &dyn Fn(usize) -> f64| -> Result<Tensor<f32>> {
        Tensor::new(vec![1, n, n], (0..n * n).map(|i| clip(f(i)) as f32).collect())
    };
    let (a, b, c) = (&latents.a, &latents.b, &latents.c);
    Ok(CaseRecord {
        id: id.into(),
        seed,
        p1: image(&|i| a[i])?,
        p2: image(&|i| 0.6 * a[i] + 0.4 * b[i])?,
        p3: image(&|i| 0.6 * a[i] + 0.4 * c[i])?,
        y: image(&|i| 0.3 * (1.0 - a[i]) + 0.35 * b[i] + 0.35 * c[i])?,
    })
}

/// Deterministic phantom case. `size` must be a multiple of 16.
pub fn generate_case(seed: u64, size: usize) -> Result<CaseRecord> {
    let latents = generate_latents(seed, size)?;
    compose_case(format!("seed-{seed}"), seed, &latents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_case(42, 32).unwrap();
        let b = generate_case(42, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.p1, generate_case(43, 32).unwrap().p1);
    }

    #[test]
    fn zero_latents_give_constant_target() {
        let n = 16;
        let z = LatentFields {
            size: n,
            a: vec![0.0; n * n],
            b: vec![0.0; n * n],
            c: vec![0.0; n * n],
        };
        let case = compose_case("z", 0, &z).unwrap();
        for img in [&case.p1, &case.p2, &case.p3] {
            assert!(img.data().iter().all(|&v| v == 0.0));
        }
        assert!(case.y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn all_images_in_unit_interval() {
        for seed in 0..5 {
            let c = generate_case(seed, 32).unwrap();
            for img in [&c.p1, &c.p2, &c.p3, &c.y] {
                assert_eq!(img.shape(), &[1, 32, 32]);
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn target_recoverable_by_inversion() {
        let c = generate_case(9, 32).unwrap();
        let mut checked = 0;
        for i in 0..c.y.numel() {
            let a = c.p1.data()[i] as f64;
            let (p2, p3) = (c.p2.data()[i] as f64, c.p3.data()[i] as f64);
            if [p2, p3, c.y.data()[i] as f64].iter().any(|&v| v <= 0.0 || v >= 1.0) {
                continue;
            }
            let b = (p2 - 0.6 * a) / 0.4;
            let cc = (p3 - 0.6 * a) / 0.4;
            let y = 0.3 * (1.0 - a) + 0.35 * b + 0.35 * cc;
            assert!((y - c.y.data()[i] as f64).abs() < 1e-6, "pixel {i}");
            checked += 1;
        }
        assert!(checked > 900);
    }

    #[test]
    fn changing_b_stream_leaves_p1_and_p3() {
        let mut l = generate_latents(5, 32).unwrap();
        let base = compose_case("x", 5, &l).unwrap();
        l.b = noise_field(&mut substream(999, STREAM_B), 32);
        let other = compose_case("x", 5, &l).unwrap();
        assert_eq!(base.p1, other.p1);
        assert_eq!(base.p3, other.p3);
        assert_ne!(base.p2, other.p2);
        assert_ne!(base.y, other.y);
    }

    #[test]
    fn size_must_be_multiple_of_sixteen() {
        assert!(matches!(generate_case(1, 24), Err(Error::Config(_))));
        assert!(matches!(generate_case(1, 8), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_is_normalized_and_truncated() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
