//! Synthetic scene and caption corpus, plus the on-disk dataset container.

mod io;
mod synth;

pub use io::{import_external, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{
    caption_scene, generate_corpus, generate_scene, region_color, scene_features, Color, SceneObject, Shape, Size, SyntheticScene,
    GRID_DIM, MAX_CAPTION_WORDS, MAX_OBJECTS, REFERENCES_PER_EXAMPLE, REGION_DIM,
};

use serde::{Deserialize, Serialize};

use crate::geometry::{BoundingBox, GridLayout};
use crate::numerics::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Every word the caption grammar can emit.
pub const WORDS: [&str; 23] = [
    "a", "one", "large", "big", "small", "little", "red", "blue", "green", "yellow", "circle", "square", "triangle",
    "left", "right", "of", "above", "below", "on", "with", "in", "background", "scene",
];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{file}: bad magic bytes, expected DLDS")]
    BadMagic { file: String },
    #[error("{file}: unsupported container version {found}")]
    Version { file: String, found: u32 },
    #[error("{file}: truncated or corrupt record at example {example}: {detail}")]
    Truncated { file: String, example: usize, detail: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// Token table: three special symbols followed by the grammar words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { words: SPECIALS.iter().chain(WORDS.iter()).map(|w| w.to_string()).collect() }
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self, DataError> {
        if words.len() < 3 || words[..3].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(DataError::Invalid("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>, DataError> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).filter(|&i| i > EOS).ok_or_else(|| DataError::UnknownWord(t.as_ref().into())))
            .collect()
    }

    /// Words up to the first end marker, skipping padding and start markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.word(i).map(str::to_owned))
            .collect()
    }
}

/// One image's features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `[n_regions, region_dim]`
    pub regions: Tensor,
    /// `[rows * cols, grid_dim]`
    pub grids: Tensor,
    pub boxes: Vec<BoundingBox>,
    pub layout: GridLayout,
}

impl FeatureBundle {
    pub fn new(regions: Tensor, grids: Tensor, boxes: Vec<BoundingBox>, layout: GridLayout) -> Result<Self, DataError> {
        if regions.rank() != 2 || regions.shape()[0] != boxes.len() {
            return Err(DataError::Invalid(format!(
                "region features {:?} do not match {} boxes",
                regions.shape(),
                boxes.len()
            )));
        }
        if grids.rank() != 2 || grids.shape()[0] != layout.len() {
            return Err(DataError::Invalid(format!("grid features {:?} do not match layout {layout}", grids.shape())));
        }
        Ok(Self { regions, grids, boxes, layout })
    }

    pub fn n_regions(&self) -> usize {
        self.boxes.len()
    }

    pub fn region_dim(&self) -> usize {
        self.regions.shape()[1]
    }

    pub fn grid_dim(&self) -> usize {
        self.grids.shape()[1]
    }
}

/// Features plus reference captions as word ids without start or end markers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: FeatureBundle,
    pub captions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub counts: SplitCounts,
    pub region_dim: usize,
    pub grid_dim: usize,
    pub layout: String,
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<TrainExample>,
    pub val: Vec<TrainExample>,
    pub test: Vec<TrainExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TrainExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn vocab(&self) -> Result<Vocab, DataError> {
        Vocab::from_words(self.manifest.vocab.clone())
    }

    pub fn layout(&self) -> Result<GridLayout, DataError> {
        self.manifest.layout.parse().map_err(|e| DataError::Invalid(format!("layout: {e}")))
    }
}
