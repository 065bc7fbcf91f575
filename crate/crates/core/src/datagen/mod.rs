//! Synthetic toppling-block videos and their on-disk format.

mod dataset;
mod render;
mod world;

pub use dataset::{generate_dataset, DatasetManifest, DatasetParams, Split, MANIFEST_FILE, MANIFEST_FORMAT, SPLITS, SPLIT_SEED_STRIDE};
pub use render::render;
pub use world::{block_size_for, Block, Fall, Shape, TowerLayout, WorldState, GROUND_Y, PALETTE};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{decode_kv, encode_kv, Container, DType, RawTensor};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

pub const SEQUENCE_FORMAT: &str = "compvid-sequence-v1";

/// Generator knobs beyond the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub n_blocks: usize,
    pub horizon: usize,
    pub canvas: usize,
    pub p_unstable: f64,
    /// Steps a falling sub-tower needs to turn 90 degrees.
    pub fall_steps: usize,
}

impl GeneratorParams {
    pub fn new(n_blocks: usize, horizon: usize, canvas: usize) -> Self {
        GeneratorParams {
            n_blocks,
            horizon,
            canvas,
            p_unstable: 0.75,
            fall_steps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > 8 {
            return Err(Error::arg(format!("n_blocks must be in 1..=8, got {}", self.n_blocks)));
        }
        if self.horizon == 0 {
            return Err(Error::arg("horizon must be >= 1"));
        }
        if self.canvas < 32 {
            return Err(Error::arg(format!("canvas must be >= 32, got {}", self.canvas)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub seed: u64,
    pub n_entities: usize,
    pub fall: Fall,
    /// Supporting block of the falling sub-tower, if any.
    pub unstable_at: Option<usize>,
}

impl SequenceMeta {
    fn to_text(&self) -> String {
        encode_kv([
            ("seed", self.seed.to_string()),
            ("n_entities", self.n_entities.to_string()),
            ("fall", self.fall.as_str().to_string()),
            (
                "unstable_at",
                self.unstable_at.map_or("none".to_string(), |k| k.to_string()),
            ),
        ])
    }

    fn from_text(text: &str) -> Result<Self> {
        let kv = decode_kv(text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format("meta", format!("missing key `{k}`")))
        };
        let bad = |k: &str| Error::format("meta", format!("invalid value for `{k}`"));
        Ok(SequenceMeta {
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            n_entities: get("n_entities")?.parse().map_err(|_| bad("n_entities"))?,
            fall: Fall::parse(get("fall")?).ok_or_else(|| bad("fall"))?,
            unstable_at: match get("unstable_at")? {
                "none" => None,
                v => Some(v.parse().map_err(|_| bad("unstable_at"))?),
            },
        })
    }
}

/// `T + 1` RGB frames with per-frame entity centers.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_entities: usize,
    /// `n_frames x height x width x 3`, row-major.
    pub frames: Vec<u8>,
    /// `n_frames x n_entities x 2` normalized `(x, y)` centers.
    pub centers: Vec<f32>,
    pub meta: SequenceMeta,
}

impl VideoSequence {
    pub fn horizon(&self) -> usize {
        self.n_frames - 1
    }

    pub fn frame_bytes(&self, t: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Frame `t` as a `(3, H, W)` tensor in `[0, 1]`.
    pub fn frame_chw<T: Float>(&self, t: usize) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let bytes = self.frame_bytes(t);
        let mut data = vec![T::ZERO; 3 * h * w];
        let scale = 1.0 / 255.0;
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = T::from_f64(bytes[i * 3 + c] as f64 * scale);
            }
        }
        Tensor::new([3, h, w], data)
    }

    pub fn center(&self, t: usize, n: usize) -> [f64; 2] {
        let base = (t * self.n_entities + n) * 2;
        [self.centers[base] as f64, self.centers[base + 1] as f64]
    }

    pub fn centers_at(&self, t: usize) -> Vec<[f64; 2]> {
        (0..self.n_entities).map(|n| self.center(t, n)).collect()
    }

    /// Frames `start..=start + steps` as a sequence of their own.
    pub fn window(&self, start: usize, steps: usize) -> Result<VideoSequence> {
        if start + steps >= self.n_frames {
            return Err(Error::arg(format!(
                "window {start}..={} exceeds {} frames",
                start + steps,
                self.n_frames
            )));
        }
        let fb = self.height * self.width * 3;
        let cb = self.n_entities * 2;
        let end = start + steps + 1;
        Ok(VideoSequence {
            n_frames: steps + 1,
            frames: self.frames[start * fb..end * fb].to_vec(),
            centers: self.centers[start * cb..end * cb].to_vec(),
            meta: self.meta.clone(),
            ..*self
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::Validation("sequence has no frames".into()));
        }
        if self.frames.len() != self.n_frames * self.height * self.width * 3 {
            return Err(Error::Validation("frame buffer length does not match its shape".into()));
        }
        if self.centers.len() != self.n_frames * self.n_entities * 2 {
            return Err(Error::Validation("frames count and centers count disagree".into()));
        }
        if let Some(bad) = self.centers.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("center coordinate {bad} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(
            "frames",
            RawTensor::u8(vec![self.n_frames, self.height, self.width, 3], self.frames.clone()),
        );
        c.insert(
            "centers",
            RawTensor::f32(vec![self.n_frames, self.n_entities, 2], &self.centers),
        );
        c.metadata.insert("format".into(), SEQUENCE_FORMAT.into());
        c.metadata.insert("meta".into(), self.meta.to_text());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("format")? != SEQUENCE_FORMAT {
            return Err(Error::format("format", "not a compvid sequence file"));
        }
        let frames = c.tensor("frames")?;
        if frames.dtype != DType::U8 || frames.shape.len() != 4 || frames.shape[3] != 3 {
            return Err(Error::format("frames", "expected U8 tensor of shape (T+1, H, W, 3)"));
        }
        let centers = c.tensor("centers")?;
        if centers.dtype != DType::F32 || centers.shape.len() != 3 || centers.shape[2] != 2 {
            return Err(Error::format("centers", "expected F32 tensor of shape (T+1, N, 2)"));
        }
        if centers.shape[0] != frames.shape[0] {
            return Err(Error::format("centers", "time length differs from `frames`"));
        }
        let meta = SequenceMeta::from_text(c.meta("meta")?)?;
        let seq = VideoSequence {
            n_frames: frames.shape[0],
            height: frames.shape[1],
            width: frames.shape[2],
            n_entities: centers.shape[1],
            frames: frames.bytes.clone(),
            centers: centers.to_f32(),
            meta,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Independent random streams for the layout and the fall direction.
fn seeded_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let layout = ChaCha8Rng::seed_from_u64(seed);
    let mut direction = ChaCha8Rng::seed_from_u64(seed);
    direction.set_stream(1);
    (layout, direction)
}

pub fn draw_fall(rng: &mut impl rand::Rng) -> Fall {
    if rng.random_bool(0.5) {
        Fall::Left
    } else {
        Fall::Right
    }
}

/// Render a known layout with a given fall direction.
pub fn sequence_from_layout(layout: &TowerLayout, fall: Fall, params: &GeneratorParams, seed: u64) -> VideoSequence {
    let fall = if layout.is_stable() { Fall::None } else { fall };
    let states = layout.simulate(fall, params.horizon, params.fall_steps);
    let mut frames = Vec::with_capacity(states.len() * params.canvas * params.canvas * 3);
    let mut centers = Vec::with_capacity(states.len() * layout.len() * 2);
    for s in &states {
        frames.extend(render(layout, s, params.canvas));
        for c in &s.centers {
            centers.push(c[0].clamp(0.0, 1.0) as f32);
            centers.push(c[1].clamp(0.0, 1.0) as f32);
        }
    }
    VideoSequence {
        n_frames: states.len(),
        height: params.canvas,
        width: params.canvas,
        n_entities: layout.len(),
        frames,
        centers,
        meta: SequenceMeta {
            seed,
            n_entities: layout.len(),
            fall,
            unstable_at: layout.instability(),
        },
    }
}

pub fn generate_with(params: &GeneratorParams, seed: u64) -> Result<VideoSequence> {
    params.validate()?;
    let (mut layout_rng, mut dir_rng) = seeded_streams(seed);
    let layout = TowerLayout::sample(&mut layout_rng, params.n_blocks, params.p_unstable);
    let fall = draw_fall(&mut dir_rng);
    Ok(sequence_from_layout(&layout, fall, params, seed))
}

/// One toppling-tower video with `horizon + 1` frames.
pub fn generate_sequence(seed: u64, n_blocks: usize, horizon: usize, canvas: usize) -> Result<VideoSequence> {
    generate_with(&GeneratorParams::new(n_blocks, horizon, canvas), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        let s = generate_sequence(0, 3, 16, 64).unwrap();
        assert_eq!(s.n_frames, 17);
        assert_eq!(s.frames.len(), 17 * 64 * 64 * 3);
        assert_eq!(s.centers.len(), 17 * 3 * 2);
        assert!(s.centers.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_sequence(7, 3, 16, 64).unwrap(), generate_sequence(7, 3, 16, 64).unwrap());
        assert_ne!(generate_sequence(7, 3, 16, 64).unwrap(), generate_sequence(8, 3, 16, 64).unwrap());
    }

    #[test]
    fn aligned_tower_is_static() {
        let params = GeneratorParams::new(4, 16, 64);
        let s = sequence_from_layout(&TowerLayout::aligned(4), Fall::Left, &params, 0);
        for t in 0..s.n_frames {
            assert_eq!(s.centers_at(t), s.centers_at(0));
        }
        assert_eq!(s.meta.fall, Fall::None);
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(generate_sequence(0, 0, 16, 64), Err(Error::Argument(_))));
        assert!(matches!(generate_sequence(0, 9, 16, 64), Err(Error::Argument(_))));
        assert!(matches!(generate_sequence(0, 3, 0, 64), Err(Error::Argument(_))));
        assert!(matches!(generate_sequence(0, 3, 16, 16), Err(Error::Argument(_))));
    }

    #[test]
    fn centers_stay_inside_for_tall_towers() {
        for seed in 0..40 {
            for n in [6, 8] {
                let s = generate_sequence(seed, n, 16, 64).unwrap();
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn fall_direction_is_balanced_for_identical_first_frames() {
        let params = GeneratorParams::new(3, 16, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut layout = TowerLayout::sample(&mut rng, 3, 1.0);
        // make it unstable regardless of what was drawn
        layout.xs[2] = layout.xs[1] + 0.7 * layout.block_size;
        let first = sequence_from_layout(&layout, Fall::Left, &params, 0);
        let mut left = 0;
        let trials = 400;
        for seed in 0..trials {
            let (_, mut dir_rng) = seeded_streams(seed);
            let s = sequence_from_layout(&layout, draw_fall(&mut dir_rng), &params, seed);
            assert_eq!(s.frame_bytes(0), first.frame_bytes(0));
            if s.meta.fall == Fall::Left {
                left += 1;
            }
        }
        let freq = left as f64 / trials as f64;
        assert!((0.4..=0.6).contains(&freq), "left frequency {freq}");
    }

    #[test]
    fn both_directions_occur_over_seeds() {
        let mut counts = [0usize; 3];
        for seed in 0..300 {
            let s = generate_sequence(seed, 3, 16, 64).unwrap();
            counts[s.meta.fall as usize] += 1;
        }
        let falls = (counts[1] + counts[2]) as f64;
        let left = counts[1] as f64 / falls;
        assert!((0.4..=0.6).contains(&left), "counts {counts:?}");
    }
}
