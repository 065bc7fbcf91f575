//! Train/val/test splits on disk and the line-oriented manifest that indexes them.
//!
//! Manifest layout (`manifest.txt`):
//!
//! ```text
//! # compvid dataset manifest
//! format = compvid-manifest-v1
//! base_seed = 0
//! canvas = 64
//! ...
//!
//! [train]
//! @n_entities 3 8
//! train/seq_00000000_n3.safetensors
//! ```
//!
//! Header lines are `key = value`. Each `[split]` section lists entity-count
//! tallies (`@n_entities <n> <count>`) and then one relative path per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{generate_with, GeneratorParams, VideoSequence};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "compvid-manifest-v1";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
/// Seeds of split `i` start at `base_seed + i * SPLIT_SEED_STRIDE`.
pub const SPLIT_SEED_STRIDE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
    pub horizon: usize,
    pub canvas: usize,
    /// Entity counts per split; sequence `i` uses `blocks[i % len]`.
    pub train_blocks: Vec<usize>,
    pub val_blocks: Vec<usize>,
    pub test_blocks: Vec<usize>,
    pub p_unstable: f64,
    pub fall_steps: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_train: 8,
            n_val: 2,
            n_test: 2,
            base_seed: 0,
            horizon: 16,
            canvas: 64,
            train_blocks: vec![3],
            val_blocks: vec![3],
            test_blocks: vec![3],
            p_unstable: 0.75,
            fall_steps: 10,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(key, format!("`{v}` is not a comma-separated list")))
}

impl DatasetParams {
    fn count(&self, split: &str) -> usize {
        match split {
            "train" => self.n_train,
            "val" => self.n_val,
            _ => self.n_test,
        }
    }

    fn blocks(&self, split: &str) -> &[usize] {
        match split {
            "train" => &self.train_blocks,
            "val" => &self.val_blocks,
            _ => &self.test_blocks,
        }
    }

    fn header(&self) -> Vec<(&'static str, String)> {
        vec![
            ("format", MANIFEST_FORMAT.to_string()),
            ("base_seed", self.base_seed.to_string()),
            ("canvas", self.canvas.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("train_blocks", join(&self.train_blocks)),
            ("val_blocks", join(&self.val_blocks)),
            ("test_blocks", join(&self.test_blocks)),
            ("p_unstable", self.p_unstable.to_string()),
            ("fall_steps", self.fall_steps.to_string()),
        ]
    }

    fn from_header(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(k, "missing manifest header entry"))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(k, "not an integer"))
        };
        if get("format")? != MANIFEST_FORMAT {
            return Err(Error::format("format", "unsupported manifest format"));
        }
        Ok(DatasetParams {
            n_train: num("n_train")? as usize,
            n_val: num("n_val")? as usize,
            n_test: num("n_test")? as usize,
            base_seed: num("base_seed")?,
            horizon: num("horizon")? as usize,
            canvas: num("canvas")? as usize,
            train_blocks: parse_list("train_blocks", get("train_blocks")?)?,
            val_blocks: parse_list("val_blocks", get("val_blocks")?)?,
            test_blocks: parse_list("test_blocks", get("test_blocks")?)?,
            p_unstable: get("p_unstable")?
                .parse()
                .map_err(|_| Error::format("p_unstable", "not a number"))?,
            fall_steps: num("fall_steps")? as usize,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    /// Paths relative to the manifest directory.
    pub paths: Vec<PathBuf>,
    pub entity_counts: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory containing `manifest.txt`; split paths are relative to it.
    pub root: PathBuf,
    pub params: DatasetParams,
    pub splits: BTreeMap<String, Split>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::arg(format!("manifest has no split `{name}`")))
    }

    pub fn split_paths(&self, name: &str) -> Result<Vec<PathBuf>> {
        Ok(self.split(name)?.paths.iter().map(|p| self.root.join(p)).collect())
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<VideoSequence>> {
        self.split_paths(name)?.iter().map(|p| VideoSequence::load(p)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# compvid dataset manifest\n");
        for (k, v) in self.params.header() {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (name, split) in &self.splits {
            let _ = writeln!(out, "\n[{name}]");
            for (n, count) in &split.entity_counts {
                let _ = writeln!(out, "@n_entities {n} {count}");
            }
            for p in &split.paths {
                let _ = writeln!(out, "{}", p.display());
            }
        }
        out
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut splits: BTreeMap<String, Split> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                splits.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            match &current {
                None => {
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        Error::format("header", format!("line {} is not `key = value`", i + 1))
                    })?;
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                Some(name) => {
                    let split = splits.get_mut(name).unwrap();
                    if let Some(rest) = line.strip_prefix("@n_entities") {
                        let nums: Vec<usize> = rest
                            .split_whitespace()
                            .map(str::parse)
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::format("n_entities", format!("bad tally on line {}", i + 1)))?;
                        if nums.len() != 2 {
                            return Err(Error::format("n_entities", format!("bad tally on line {}", i + 1)));
                        }
                        split.entity_counts.insert(nums[0], nums[1]);
                    } else {
                        split.paths.push(PathBuf::from(line));
                    }
                }
            }
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            params: DatasetParams::from_header(&header)?,
            splits,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &root)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.manifest_path();
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Every listed file loads, matches its tally, and no seed appears in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<u64, String> = BTreeMap::new();
        for (name, split) in &self.splits {
            let mut tally: BTreeMap<usize, usize> = BTreeMap::new();
            for p in &split.paths {
                let seq = VideoSequence::load(&self.root.join(p))?;
                *tally.entry(seq.n_entities).or_default() += 1;
                if let Some(other) = seen.insert(seq.meta.seed, name.clone()) {
                    return Err(Error::Validation(format!(
                        "seed {} appears in splits `{other}` and `{name}`",
                        seq.meta.seed
                    )));
                }
            }
            if tally != split.entity_counts {
                return Err(Error::Validation(format!("entity tally mismatch in split `{name}`")));
            }
        }
        Ok(())
    }
}

/// Write every split under `out_dir` plus `manifest.txt`.
pub fn generate_dataset(out_dir: &Path, params: &DatasetParams) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut splits = BTreeMap::new();
    for (si, name) in SPLITS.iter().enumerate() {
        let blocks = params.blocks(name);
        if blocks.is_empty() && params.count(name) > 0 {
            return Err(Error::arg(format!("split `{name}` has no block counts")));
        }
        let mut split = Split::default();
        for i in 0..params.count(name) {
            let seed = params.base_seed + si as u64 * SPLIT_SEED_STRIDE + i as u64;
            let n = blocks[i % blocks.len()];
            let gp = GeneratorParams {
                n_blocks: n,
                horizon: params.horizon,
                canvas: params.canvas,
                p_unstable: params.p_unstable,
                fall_steps: params.fall_steps,
            };
            let seq = generate_with(&gp, seed)?;
            let rel = PathBuf::from(name).join(format!("seq_{seed:08}_n{n}.safetensors"));
            seq.save(&out_dir.join(&rel))?;
            split.paths.push(rel);
            *split.entity_counts.entry(n).or_default() += 1;
        }
        splits.insert(name.to_string(), split);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        params: params.clone(),
        splits,
    };
    manifest.save()?;
    Ok(manifest)
}
