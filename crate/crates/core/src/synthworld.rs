//! Deterministic toy image-caption world with exact phrase-region ground
//! truth and a tunable co-occurrence bias.
//!
//! Each category has a random unit prototype. An image holds a few object
//! regions (prototype plus noise) and fills its remaining grid cells with
//! context regions that mix an object's prototype with the prototype of
//! its biased partner category. The caption lists the object categories,
//! one token per object, and each token is annotated as a one-word phrase
//! linked to that object's regions.
//!
//! On disk a dataset is a directory holding `world.json` plus one JSON-lines
//! file per split. Floats are written with 17 significant digits.

use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{FragmentKind, FragmentSet};
use crate::jsonfmt::to_json_line;
use crate::metrics::{AlignmentAnnotation, BBox, Phrase};
use crate::numkit::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_pairs: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub regions_per_image: usize,
    /// Inclusive `[min, max]` number of objects per image.
    pub objects_per_image: [usize; 2],
    pub max_regions_per_object: usize,
    /// Number of categories; every category is one caption token.
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Standard deviation of the per-dimension Gaussian noise added to
    /// every region feature.
    pub context_noise_sigma: f64,
    /// Probability that an image's anchor category appears together with
    /// its partner category.
    pub cooccurrence_bias: f64,
    /// Scale of the host and partner prototypes mixed into context regions.
    pub context_leak: f64,
    /// Side length of one grid cell in pixels.
    pub cell_size: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_pairs: 720,
            train_fraction: 0.7,
            val_fraction: 0.15,
            regions_per_image: 8,
            objects_per_image: [2, 3],
            max_regions_per_object: 2,
            vocab_size: 12,
            embed_dim: 16,
            context_noise_sigma: 0.3,
            cooccurrence_bias: 0.7,
            context_leak: 0.6,
            cell_size: 64.0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::Config(msg));
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_image {:?} must satisfy 1 <= min <= max", self.objects_per_image));
        }
        if self.regions_per_image < hi {
            return bad(format!(
                "regions_per_image {} is smaller than the maximum object count {hi}",
                self.regions_per_image
            ));
        }
        if self.vocab_size < 2 * hi {
            return bad(format!(
                "vocab_size {} must be at least twice the maximum object count {hi}",
                self.vocab_size
            ));
        }
        if self.max_regions_per_object == 0 {
            return bad("max_regions_per_object must be >= 1".into());
        }
        if self.embed_dim == 0 || self.num_pairs == 0 {
            return bad("embed_dim and num_pairs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cooccurrence_bias) {
            return bad(format!("cooccurrence_bias {} outside [0, 1]", self.cooccurrence_bias));
        }
        if !(self.context_noise_sigma >= 0.0 && self.context_noise_sigma.is_finite()) {
            return bad(format!("context_noise_sigma {} must be >= 0", self.context_noise_sigma));
        }
        if !(self.context_leak >= 0.0 && self.context_leak.is_finite()) {
            return bad(format!("context_leak {} must be >= 0", self.context_leak));
        }
        let fractions_ok = (0.0..=1.0).contains(&self.train_fraction)
            && (0.0..=1.0).contains(&self.val_fraction)
            && self.train_fraction + self.val_fraction <= 1.0;
        if !fractions_ok {
            return bad("train_fraction + val_fraction must lie in [0, 1]".into());
        }
        if !(self.cell_size > 0.0) {
            return bad("cell_size must be positive".into());
        }
        Ok(())
    }

    /// Partner category of `c` in the co-occurrence table: categories are
    /// paired `(0, 1), (2, 3), …`; an odd trailing category has none.
    pub fn partner(&self, c: usize) -> Option<usize> {
        let p = c ^ 1;
        (p < self.vocab_size).then_some(p)
    }

    fn split_sizes(&self) -> (usize, usize, usize) {
        let train = (self.num_pairs as f64 * self.train_fraction).round() as usize;
        let val = ((self.num_pairs as f64 * self.val_fraction).round() as usize)
            .min(self.num_pairs - train);
        (train, val, self.num_pairs - train - val)
    }
}

/// One image region: box plus raw feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feat: Vec<f64>,
}

/// One image-caption pair with its phrase-region annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSample {
    pub id: String,
    pub regions: Vec<Region>,
    pub tokens: Vec<usize>,
    #[serde(rename = "phrases")]
    pub annotation: AlignmentAnnotation,
}

impl PairSample {
    pub fn boxes(&self) -> Vec<BBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }

    /// Raw region features as an image fragment set.
    pub fn image_fragments(&self) -> FragmentSet {
        let rows: Vec<Vec<f64>> = self.regions.iter().map(|r| r.feat.clone()).collect();
        let features = Tensor::from_rows(&rows).expect("validated on construction or load");
        FragmentSet::new(features, FragmentKind::Image)
            .and_then(|f| f.with_boxes(self.boxes()))
            .expect("validated on construction or load")
    }

    fn validate(&self, embed_dim: usize, vocab_size: usize) -> Result<(), (String, String)> {
        if self.regions.is_empty() {
            return Err(("regions".into(), "at least one region required".into()));
        }
        if self.tokens.is_empty() {
            return Err(("tokens".into(), "at least one token required".into()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.feat.len() != embed_dim {
                return Err((
                    format!("regions[{i}].feat"),
                    format!("expected {embed_dim} values, got {}", r.feat.len()),
                ));
            }
            if r.feat.iter().any(|v| !v.is_finite()) {
                return Err((format!("regions[{i}].feat"), "non-finite value".into()));
            }
            if !(r.bbox.w > 0.0 && r.bbox.h > 0.0) {
                return Err((format!("regions[{i}].box"), "width and height must be positive".into()));
            }
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(("tokens".into(), format!("token {t} outside vocabulary of {vocab_size}")));
        }
        self.annotation
            .validate(self.tokens.len(), self.regions.len())
            .map_err(|e| ("phrases".into(), e.to_string()))
    }
}

/// Generator parameters plus the quantities derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub config: WorldConfig,
    /// Unit prototype per category.
    pub prototypes: Vec<Vec<f64>>,
}

impl WorldMeta {
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}' (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: WorldMeta,
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("{}:{line}:{column}: parse error at byte offset {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("{}:{line}: field `{field}`: {message}", path.display())]
    Invalid {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::numkit::l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn add_noise(v: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    for x in v.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += sigma * z;
    }
}

/// Object categories of one image: the anchor first, its partner second
/// when the bias draw includes it, then fillers that avoid the anchor's
/// partner.
fn draw_objects(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let [lo, hi] = cfg.objects_per_image;
    let k = rng.random_range(lo..=hi);
    let anchor = rng.random_range(0..cfg.vocab_size);
    let mut objects = vec![anchor];
    let partner = cfg.partner(anchor);
    if let Some(p) = partner {
        if k > 1 && rng.random::<f64>() < cfg.cooccurrence_bias {
            objects.push(p);
        }
    }
    while objects.len() < k {
        let pool: Vec<usize> = (0..cfg.vocab_size)
            .filter(|c| !objects.contains(c) && Some(*c) != partner)
            .collect();
        objects.push(pool[rng.random_range(0..pool.len())]);
    }
    objects
}

fn generate_pair(
    cfg: &WorldConfig,
    prototypes: &[Vec<f64>],
    id: String,
    rng: &mut ChaCha8Rng,
) -> PairSample {
    let objects = draw_objects(cfg, rng);
    let n = cfg.regions_per_image;

    // Region slots per object: at least one each, extra while room remains.
    let mut counts = vec![1usize; objects.len()];
    let mut free = n - objects.len();
    for c in counts.iter_mut() {
        let extra = rng.random_range(0..cfg.max_regions_per_object).min(free);
        *c += extra;
        free -= extra;
    }

    // Grid cells, shuffled, so region order carries no information.
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);

    let mut regions: Vec<Option<Region>> = vec![None; n];
    let mut phrases = Vec::with_capacity(objects.len());
    let mut slot_iter = slots.into_iter();
    let margin = cfg.cell_size / 16.0;
    let cell_box = |cell: usize| {
        BBox::new(
            (cell % cols) as f64 * cfg.cell_size + margin,
            (cell / cols) as f64 * cfg.cell_size + margin,
            cfg.cell_size - 2.0 * margin,
            cfg.cell_size - 2.0 * margin,
        )
    };

    for (word, (&cat, &count)) in objects.iter().zip(&counts).enumerate() {
        let mut linked = Vec::with_capacity(count);
        for _ in 0..count {
            let slot = slot_iter.next().expect("enough slots");
            let mut feat = prototypes[cat].clone();
            add_noise(&mut feat, cfg.context_noise_sigma, rng);
            regions[slot] = Some(Region {
                bbox: cell_box(cells[slot]),
                feat,
            });
            linked.push(slot);
        }
        linked.sort_unstable();
        phrases.push(Phrase {
            span: [word, word + 1],
            regions: linked,
        });
    }

    for slot in slot_iter {
        let host = objects[rng.random_range(0..objects.len())];
        let background = unit_gaussian(rng, cfg.embed_dim);
        let mut feat: Vec<f64> = background;
        for (i, v) in feat.iter_mut().enumerate() {
            *v += cfg.context_leak * prototypes[host][i];
            if let Some(p) = cfg.partner(host) {
                *v += cfg.context_leak * prototypes[p][i];
            }
        }
        add_noise(&mut feat, cfg.context_noise_sigma, rng);
        regions[slot] = Some(Region {
            bbox: cell_box(cells[slot]),
            feat,
        });
    }

    PairSample {
        id,
        regions: regions.into_iter().map(|r| r.expect("every slot filled")).collect(),
        tokens: objects,
        annotation: AlignmentAnnotation { phrases },
    }
}

/// Builds the train/val/test splits for `cfg`. Same config, same bytes.
pub fn generate(cfg: &WorldConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| unit_gaussian(&mut rng, cfg.embed_dim))
        .collect();
    let mut pairs: Vec<PairSample> = (0..cfg.num_pairs)
        .map(|i| generate_pair(cfg, &prototypes, format!("pair-{i:06}"), &mut rng))
        .collect();
    let (n_train, n_val, _) = cfg.split_sizes();
    let test = pairs.split_off(n_train + n_val);
    let val = pairs.split_off(n_train);
    Ok(Dataset {
        meta: WorldMeta {
            config: cfg.clone(),
            prototypes,
        },
        train: pairs,
        val,
        test,
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_pairs(path: &Path, pairs: &[PairSample]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&to_json_line(p).expect("pair samples always serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads a JSON-lines split, checking every record against the world
/// dimensions.
pub fn read_pairs(path: &Path, meta: &WorldMeta) -> Result<Vec<PairSample>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = io::BufReader::new(file);
    let mut offset = 0usize;
    let mut pairs = Vec::new();
    for (idx, line) in reader.split(b'\n').enumerate() {
        let line_no = idx + 1;
        let bytes = line.map_err(io_err(path))?;
        let line_start = offset;
        offset += bytes.len() + 1;
        let text = std::str::from_utf8(&bytes).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            column: e.valid_up_to() + 1,
            offset: line_start + e.valid_up_to(),
            message: "invalid UTF-8".into(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let pair: PairSample = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            column: e.column(),
            offset: line_start + e.column().saturating_sub(1),
            message: e.to_string(),
        })?;
        pair.validate(meta.embed_dim(), meta.vocab_size())
            .map_err(|(field, message)| DatasetError::Invalid {
                path: path.to_path_buf(),
                line: line_no,
                field,
                message,
            })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PairSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta_path = dir.join("world.json");
        let mut meta = to_json_line(&self.meta).expect("world meta always serializes");
        meta.push('\n');
        fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
        for split in Split::ALL {
            write_pairs(&dir.join(split.file_name()), self.split(split))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let meta = load_meta(dir)?;
        let train = read_pairs(&dir.join(Split::Train.file_name()), &meta)?;
        let val = read_pairs(&dir.join(Split::Val.file_name()), &meta)?;
        let test = read_pairs(&dir.join(Split::Test.file_name()), &meta)?;
        Ok(Self {
            meta,
            train,
            val,
            test,
        })
    }
}

pub fn load_meta(dir: &Path) -> Result<WorldMeta, DatasetError> {
    let path = dir.join("world.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: WorldMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.clone(),
        line: e.line(),
        column: e.column(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    meta.config.validate()?;
    if meta.prototypes.len() != meta.vocab_size()
        || meta.prototypes.iter().any(|p| p.len() != meta.embed_dim())
    {
        return Err(DatasetError::Invalid {
            path,
            line: 1,
            field: "prototypes".into(),
            message: "one prototype of embed_dim values per category required".into(),
        });
    }
    Ok(meta)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + column.saturating_sub(1)
}
