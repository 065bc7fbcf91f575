//! Kinematic 2-d block-tower world.
//!
//! A tower is a column of equally sized blocks resting on the ground. The
//! tower is unstable when some block's center is offset from the block below by
//! more than half a block width. The sub-tower above the lowest such interface
//! then rotates rigidly about the top corner of the supporting block at a
//! constant angular rate until it lies flat (or touches the canvas border).
//! The fall direction is drawn independently of the layout, so it cannot be
//! read off the first frame.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

/// Ground line in normalized image coordinates (y grows downward).
pub const GROUND_Y: f64 = 0.94;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fall {
    None,
    Left,
    Right,
}

impl Fall {
    pub fn as_str(self) -> &'static str {
        match self {
            Fall::None => "none",
            Fall::Left => "left",
            Fall::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Fall::None),
            "left" => Some(Fall::Left),
            "right" => Some(Fall::Right),
            _ => None,
        }
    }
}

pub const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.3, 0.85],
    [0.95, 0.8, 0.1],
    [0.8, 0.2, 0.75],
    [0.1, 0.75, 0.8],
    [0.95, 0.5, 0.1],
    [0.45, 0.2, 0.6],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerLayout {
    /// Side length (or diameter) in normalized units.
    pub block_size: f64,
    /// Horizontal centers, bottom block first.
    pub xs: Vec<f64>,
    pub blocks: Vec<Block>,
}

/// One frame of the world: per-block centers and rotation angles.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub centers: Vec<[f64; 2]>,
    pub angles: Vec<f64>,
}

pub fn block_size_for(n_blocks: usize) -> f64 {
    0.14f64.min(0.85 / (n_blocks as f64 + 1.0))
}

impl TowerLayout {
    /// Draw a tower; with probability `p_unstable` one interface is pushed past the
    /// stability limit.
    pub fn sample(rng: &mut impl Rng, n_blocks: usize, p_unstable: f64) -> Self {
        let w = block_size_for(n_blocks);
        let mut palette: Vec<usize> = (0..PALETTE.len()).collect();
        for i in (1..palette.len()).rev() {
            let j = rng.random_range(0..=i);
            palette.swap(i, j);
        }
        let blocks = (0..n_blocks)
            .map(|i| Block {
                shape: if rng.random_bool(0.5) { Shape::Square } else { Shape::Circle },
                color: PALETTE[palette[i % PALETTE.len()]],
            })
            .collect();
        let mut offsets: Vec<f64> = (1..n_blocks)
            .map(|_| rng.random_range(-0.3..0.3) * w)
            .collect();
        if n_blocks >= 2 && rng.random_bool(p_unstable) {
            let k = rng.random_range(0..n_blocks - 1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            offsets[k] = sign * rng.random_range(0.55..0.8) * w;
        }
        let mut xs = vec![0.5 + rng.random_range(-0.04..0.04)];
        for o in offsets {
            let last = *xs.last().unwrap();
            xs.push(last + o);
        }
        TowerLayout {
            block_size: w,
            xs,
            blocks,
        }
    }

    /// A perfectly aligned, stable tower.
    pub fn aligned(n_blocks: usize) -> Self {
        TowerLayout {
            block_size: block_size_for(n_blocks),
            xs: vec![0.5; n_blocks],
            blocks: (0..n_blocks)
                .map(|i| Block {
                    shape: Shape::Square,
                    color: PALETTE[i % PALETTE.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Index of the lowest block whose successor overhangs by more than half a width.
    pub fn instability(&self) -> Option<usize> {
        self.xs
            .windows(2)
            .position(|p| (p[1] - p[0]).abs() > self.block_size / 2.0)
    }

    pub fn is_stable(&self) -> bool {
        self.instability().is_none()
    }

    pub fn rest_state(&self) -> WorldState {
        let w = self.block_size;
        WorldState {
            centers: self
                .xs
                .iter()
                .enumerate()
                .map(|(i, &x)| [x, GROUND_Y - w / 2.0 - i as f64 * w])
                .collect(),
            angles: vec![0.0; self.len()],
        }
    }

    /// Positions after rotating the unstable sub-tower by `theta` (radians, >= 0).
    fn rotated(&self, support: usize, fall: Fall, theta: f64) -> WorldState {
        let w = self.block_size;
        let mut state = self.rest_state();
        let side = if fall == Fall::Left { -1.0 } else { 1.0 };
        let pivot = [self.xs[support] + side * w / 2.0, state.centers[support][1] - w / 2.0];
        // Falling left is a counter-clockwise turn in y-up coordinates.
        let phi = -side * theta;
        let (s, c) = phi.sin_cos();
        for j in support + 1..self.len() {
            let dx = state.centers[j][0] - pivot[0];
            let dy_up = pivot[1] - state.centers[j][1];
            let rx = dx * c - dy_up * s;
            let ry = dx * s + dy_up * c;
            state.centers[j] = [pivot[0] + rx, pivot[1] - ry];
            state.angles[j] = phi;
        }
        state
    }

    fn inside_canvas(&self, state: &WorldState) -> bool {
        let m = self.block_size / 2.0;
        state
            .centers
            .iter()
            .all(|c| c.iter().all(|&v| v >= m && v <= 1.0 - m))
    }

    /// Roll the world forward `horizon` steps; returns `horizon + 1` states.
    pub fn simulate(&self, fall: Fall, horizon: usize, fall_steps: usize) -> Vec<WorldState> {
        let rest = self.rest_state();
        let Some(support) = self.instability().filter(|_| fall != Fall::None) else {
            return vec![rest; horizon + 1];
        };
        // Largest reachable angle before a center would leave the canvas.
        let grid = 400;
        let mut theta_max = 0.0;
        for i in 1..=grid {
            let theta = FRAC_PI_2 * i as f64 / grid as f64;
            if !self.inside_canvas(&self.rotated(support, fall, theta)) {
                break;
            }
            theta_max = theta;
        }
        let rate = FRAC_PI_2 / fall_steps.max(1) as f64;
        (0..=horizon)
            .map(|t| self.rotated(support, fall, (rate * t as f64).min(theta_max)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stability_predicate() {
        let mut t = TowerLayout::aligned(3);
        assert!(t.is_stable());
        t.xs[2] = t.xs[1] + 0.6 * t.block_size;
        assert_eq!(t.instability(), Some(1));
        t.xs[1] = t.xs[0] - 0.51 * t.block_size;
        assert_eq!(t.instability(), Some(0));
    }

    #[test]
    fn falls_move_toward_the_chosen_side() {
        let mut t = TowerLayout::aligned(3);
        t.xs[2] = t.xs[1] + 0.6 * t.block_size;
        let left = t.simulate(Fall::Left, 16, 10);
        let right = t.simulate(Fall::Right, 16, 10);
        assert!(left[16].centers[2][0] < t.xs[2]);
        assert!(right[16].centers[2][0] > t.xs[2]);
        // Supporting blocks never move.
        assert_eq!(left[16].centers[0], left[0].centers[0]);
        assert_eq!(right[16].centers[1], right[0].centers[1]);
    }
}
