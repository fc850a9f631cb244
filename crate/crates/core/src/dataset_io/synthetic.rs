//! A procedural stand-in for CIFAR-10 with the same record format.
//!
//! Each of the ten classes is a distinct shape family drawn with random
//! colors, position, size and rotation over a shaded background. The set is
//! used when the real dataset is not on disk, and by tests that need
//! labeled 32x32 data.

use rand::Rng;

use super::{seeded_rng, sub_seed, CifarRecord};

pub const SURROGATE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "plus", "hstripes", "vstripes", "checker", "diamond", "cross",
];

const SIDE: usize = 32;
const SUPERSAMPLE: usize = 3;

/// Whether the shape-local point `(u, v)` (unit scale) is foreground.
fn inside(class: u8, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.85 && av <= 0.85,
        2 => v <= 0.75 && v >= -0.9 + 1.65 * (au / 0.95) && au <= 0.95,
        3 => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        4 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        5 => au <= 1.0 && av <= 1.0 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => au <= 1.0 && av <= 1.0 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => au <= 1.0 && av <= 1.0 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        8 => au + av <= 1.0,
        _ => au <= 1.0 && av <= 1.0 && ((u - v).abs() <= 0.28 || (u + v).abs() <= 0.28),
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn contrast(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0
}

/// Renders one labeled 32x32 record from `seed`.
pub fn render_record(class: u8, seed: u64) -> CifarRecord {
    assert!(class <= 9);
    let mut rng = seeded_rng(seed);
    let bg0 = random_color(&mut rng);
    let bg1 = random_color(&mut rng);
    let mut fg = random_color(&mut rng);
    while contrast(&fg, &bg0) < 0.35 || contrast(&fg, &bg1) < 0.35 {
        fg = random_color(&mut rng);
    }
    let grad_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (grad_angle.cos(), grad_angle.sin());
    let scale = rng.gen_range(8.0..12.5);
    let cx = 16.0 + rng.gen_range(-3.0..3.0);
    let cy = 16.0 + rng.gen_range(-3.0..3.0);
    let rot: f64 = rng.gen_range(-0.35..0.35);
    let (rc, rs) = (rot.cos(), rot.sin());

    let mut pixels = vec![0u8; 3 * SIDE * SIDE];
    let sub = SUPERSAMPLE as f64;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut cover = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / sub - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / sub - cy;
                    let u = (rc * px + rs * py) / scale;
                    let v = (-rs * px + rc * py) / scale;
                    cover += inside(class, u, v) as usize;
                }
            }
            let alpha = cover as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let t = (((x as f64 - 15.5) * gx + (y as f64 - 15.5) * gy) / 45.0 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                let bg = bg0[c] * (1.0 - t) + bg1[c] * t;
                let noise: f64 = rng.gen_range(-0.03..0.03);
                let v = (bg * (1.0 - alpha) + fg[c] * alpha + noise).clamp(0.0, 1.0);
                pixels[c * SIDE * SIDE + y * SIDE + x] = (v * 255.0).round() as u8;
            }
        }
    }
    CifarRecord::new(class, pixels).expect("rendered record is well formed")
}

/// `n` records with labels cycling through all ten classes.
pub fn surrogate_records(n: usize, seed: u64) -> Vec<CifarRecord> {
    (0..n).map(|i| render_record((i % 10) as u8, sub_seed(seed, i as u64))).collect()
}
