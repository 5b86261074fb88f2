//! Procedural handwritten-digit-like corpus: stroke glyphs for 0–9 drawn
//! with random affine distortions, jitter and pen width on a 28×28 canvas.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 28;

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f32 / n as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Strokes of a digit in unit-box coordinates (x right, y down).
fn glyph(d: u8) -> Vec<Stroke> {
    use std::f32::consts::PI;
    match d {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.42, 0.0, 2.0 * PI, 20)],
        1 => vec![vec![(0.36, 0.24), (0.55, 0.08), (0.55, 0.92)]],
        2 => vec![vec![
            (0.22, 0.28),
            (0.3, 0.14),
            (0.5, 0.08),
            (0.7, 0.14),
            (0.76, 0.3),
            (0.7, 0.45),
            (0.22, 0.92),
            (0.8, 0.92),
        ]],
        3 => vec![vec![
            (0.22, 0.14),
            (0.5, 0.08),
            (0.74, 0.18),
            (0.72, 0.36),
            (0.46, 0.48),
            (0.74, 0.6),
            (0.76, 0.8),
            (0.5, 0.92),
            (0.22, 0.86),
        ]],
        4 => vec![vec![(0.65, 0.92), (0.65, 0.08), (0.18, 0.66), (0.82, 0.66)]],
        5 => vec![vec![
            (0.76, 0.08),
            (0.3, 0.08),
            (0.26, 0.45),
            (0.5, 0.4),
            (0.72, 0.5),
            (0.76, 0.72),
            (0.6, 0.9),
            (0.4, 0.92),
            (0.22, 0.84),
        ]],
        6 => vec![vec![
            (0.7, 0.1),
            (0.45, 0.15),
            (0.28, 0.4),
            (0.25, 0.7),
            (0.35, 0.9),
            (0.6, 0.92),
            (0.75, 0.75),
            (0.68, 0.55),
            (0.45, 0.5),
            (0.28, 0.62),
        ]],
        7 => vec![vec![(0.2, 0.08), (0.8, 0.08), (0.42, 0.92)]],
        8 => vec![
            ellipse(0.5, 0.29, 0.21, 0.2, 0.0, 2.0 * PI, 16),
            ellipse(0.5, 0.7, 0.26, 0.22, 0.0, 2.0 * PI, 16),
        ],
        _ => vec![
            ellipse(0.5, 0.32, 0.24, 0.22, 0.0, 2.0 * PI, 16),
            vec![(0.74, 0.32), (0.7, 0.6), (0.55, 0.92)],
        ],
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Renders digit `d` with distortions drawn from `rng`; returns 28×28 bytes.
pub fn render<R: Rng + ?Sized>(d: u8, rng: &mut R) -> Vec<u8> {
    let scale = rng.gen_range(16.0..21.0f32);
    let aspect = rng.gen_range(0.8..1.1f32);
    let angle = rng.gen_range(-0.25..0.25f32);
    let shear = rng.gen_range(-0.25..0.25f32);
    let (tx, ty) = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
    let radius = rng.gen_range(0.8..1.7f32);
    let (s, c) = angle.sin_cos();
    let centre = SIDE as f32 / 2.0;
    let strokes: Vec<Stroke> = glyph(d)
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|(x, y)| {
                    let x = x + rng.gen_range(-0.025..0.025f32) - 0.5;
                    let y = y + rng.gen_range(-0.025..0.025f32) - 0.5;
                    let x = (x + shear * y) * scale * aspect;
                    let y = y * scale;
                    (centre + tx + c * x - s * y, centre + ty + s * x + c * y)
                })
                .collect()
        })
        .collect();
    let mut img = vec![0u8; SIDE * SIDE];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let p = (px as f32 + 0.5, py as f32 + 0.5);
            let mut best = f32::INFINITY;
            for st in &strokes {
                for w in st.windows(2) {
                    best = best.min(segment_distance(p, w[0], w[1]));
                }
            }
            let v = (radius + 0.5 - best).clamp(0.0, 1.0);
            img[py * SIDE + px] = (v * 255.0).round() as u8;
        }
    }
    img
}

/// `n` images cycling through the digits, plus their labels.
pub fn digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let d = rng.gen_range(0..10u8);
        pixels.extend(render(d, &mut rng));
        labels.push(d);
    }
    (pixels, labels)
}
