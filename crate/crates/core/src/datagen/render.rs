//! Anti-aliased rasterization of world states into RGB8 frames.

use super::world::{Shape, TowerLayout, WorldState, GROUND_Y};

const BACKGROUND: [f64; 3] = [0.93, 0.93, 0.9];
const GROUND: [f64; 3] = [0.55, 0.5, 0.45];
const SUPERSAMPLE: usize = 4;

fn covers(shape: Shape, size: f64, center: [f64; 2], angle: f64, p: [f64; 2]) -> bool {
    let dx = p[0] - center[0];
    let dy_up = center[1] - p[1];
    let half = size / 2.0;
    match shape {
        Shape::Circle => dx * dx + dy_up * dy_up <= half * half,
        Shape::Square => {
            let (s, c) = angle.sin_cos();
            // rotate the sample into the block frame
            let lx = dx * c + dy_up * s;
            let ly = -dx * s + dy_up * c;
            lx.abs() <= half && ly.abs() <= half
        }
    }
}

/// Render one frame as `canvas x canvas x 3` bytes.
pub fn render(layout: &TowerLayout, state: &WorldState, canvas: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(canvas * canvas * 3);
    let inv = 1.0 / canvas as f64;
    let sub = 1.0 / SUPERSAMPLE as f64;
    for py in 0..canvas {
        for px in 0..canvas {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        (px as f64 + (sx as f64 + 0.5) * sub) * inv,
                        (py as f64 + (sy as f64 + 0.5) * sub) * inv,
                    ];
                    let mut color = if p[1] >= GROUND_Y { GROUND } else { BACKGROUND };
                    for (i, block) in layout.blocks.iter().enumerate() {
                        if covers(block.shape, layout.block_size, state.centers[i], state.angles[i], p) {
                            color = block.color;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for v in acc {
                out.push((v / n * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}
