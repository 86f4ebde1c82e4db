use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::raster::{read_label, read_rgb};
use super::tiling::tile_pair;
use super::ImagePair;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Ordered ids of one split plus the tile edge used to cut them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub pair_ids: Vec<String>,
    pub tile_size: usize,
}

impl SplitManifest {
    pub fn new(split: Split, pair_ids: Vec<String>, tile_size: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for id in &pair_ids {
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate id `{id}` in {split} manifest")));
            }
        }
        if tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        Ok(Self { split, pair_ids, tile_size })
    }

    pub fn path(root: &Path, split: Split) -> PathBuf {
        root.join("list").join(format!("{split}.txt"))
    }

    /// Reads `root/list/<split>.txt`; blank lines are skipped and a trailing
    /// `.png` on an id is dropped.
    pub fn read(root: &Path, split: Split, tile_size: usize) -> Result<Self> {
        let path = Self::path(root, split);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.strip_suffix(".png").unwrap_or(l).to_string())
            .collect();
        Self::new(split, ids, tile_size)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = Self::path(root, self.split);
        std::fs::create_dir_all(path.parent().expect("list dir"))?;
        let mut text = self.pair_ids.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// Seeded split of `ids` into (train, val) with `fraction` of them (rounded,
/// at least one when any exist) going to validation. Both keep input order.
pub fn carve_validation(ids: &[String], seed: u64, fraction: f64) -> (Vec<String>, Vec<String>) {
    let n_val = if ids.is_empty() { 0 } else { ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len()) };
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut crate::init::named_rng(seed, "validation-carve"));
    let chosen: HashSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if chosen.contains(&i) { val.push(id.clone()) } else { train.push(id.clone()) }
    }
    (train, val)
}

/// Read a manifest; when `list/val.txt` is absent, validation is a seeded
/// 10 % carve-out of the training list, and training excludes it.
pub fn resolve_manifest(root: &Path, split: Split, tile_size: usize, seed: u64) -> Result<SplitManifest> {
    let val_missing = !SplitManifest::path(root, Split::Val).exists();
    match split {
        Split::Test => SplitManifest::read(root, split, tile_size),
        _ if !val_missing => SplitManifest::read(root, split, tile_size),
        _ => {
            let train = SplitManifest::read(root, Split::Train, tile_size)?;
            let (t, v) = carve_validation(&train.pair_ids, seed, 0.1);
            SplitManifest::new(split, if split == Split::Train { t } else { v }, tile_size)
        }
    }
}

pub fn load_pair(root: &Path, id: &str) -> Result<ImagePair> {
    let name = format!("{id}.png");
    let paths = [root.join("A").join(&name), root.join("B").join(&name), root.join("label").join(&name)];
    for p in &paths {
        if !p.exists() {
            return Err(Error::ingestion(p, format!("missing file for pair `{id}`")));
        }
    }
    let (h1, w1, t1) = read_rgb(&paths[0])?;
    let (h2, w2, t2) = read_rgb(&paths[1])?;
    let (hl, wl, label) = read_label(&paths[2])?;
    if (h1, w1) != (h2, w2) || (h1, w1) != (hl, wl) {
        return Err(Error::ingestion(
            &paths[0],
            format!("pair `{id}` sizes differ: A {h1}x{w1}, B {h2}x{w2}, label {hl}x{wl}"),
        ));
    }
    ImagePair::new(id, h1, w1, t1, t2, label)
}

/// Pairs in manifest order. A pair whose size is not a multiple of the
/// manifest's tile size is rejected.
pub fn load_split<'a>(root: &'a Path, manifest: &'a SplitManifest) -> impl Iterator<Item = Result<ImagePair>> + 'a {
    manifest.pair_ids.iter().map(move |id| {
        let p = load_pair(root, id)?;
        if p.height % manifest.tile_size != 0 || p.width % manifest.tile_size != 0 {
            return Err(Error::ingestion(
                root.join("A").join(format!("{id}.png")),
                format!("{}x{} is not a multiple of tile size {}", p.height, p.width, manifest.tile_size),
            ));
        }
        Ok(p)
    })
}

/// Per-channel standardisation applied after scaling bytes to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl Normalization {
    /// Interleaved RGB bytes to planar `[3, H, W]` floats.
    pub fn planar(&self, rgb: &[u8], height: usize, width: usize) -> Vec<f32> {
        let px = height * width;
        let mut out = vec![0f32; 3 * px];
        for (i, p) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * px + i] = (p[c] as f32 / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Random-access collection of equally sized training units.
pub trait PairSource: Send + Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<ImagePair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct InMemory(pub Vec<ImagePair>);

impl PairSource for InMemory {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, index: usize) -> Result<ImagePair> {
        self.0.get(index).cloned().ok_or_else(|| Error::Input(format!("index {index} out of range")))
    }
}

/// Tiles of every pair in a manifest, read lazily from disk. The most
/// recently decoded source pair is kept so consecutive tiles share a read.
pub struct TiledDirectory {
    root: PathBuf,
    tile: usize,
    entries: Vec<(usize, usize)>,
    ids: Vec<String>,
    cache: Mutex<Option<(usize, Vec<ImagePair>)>>,
}

impl TiledDirectory {
    pub fn open(root: &Path, manifest: &SplitManifest) -> Result<Self> {
        let tile = manifest.tile_size;
        let mut entries = Vec::new();
        for (i, id) in manifest.pair_ids.iter().enumerate() {
            let path = root.join("A").join(format!("{id}.png"));
            if !path.exists() {
                return Err(Error::ingestion(&path, format!("missing file for pair `{id}`")));
            }
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
            let (h, w) = (h as usize, w as usize);
            if h % tile != 0 || w % tile != 0 {
                return Err(Error::ingestion(&path, format!("pair `{id}` is {h}x{w}, not a multiple of {tile}")));
            }
            entries.extend((0..(h / tile) * (w / tile)).map(|t| (i, t)));
        }
        Ok(Self { root: root.to_path_buf(), tile, entries, ids: manifest.pair_ids.clone(), cache: Mutex::new(None) })
    }

    pub fn tile_size(&self) -> usize {
        self.tile
    }
}

impl PairSource for TiledDirectory {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        let &(pair, tile) = self.entries.get(index).ok_or_else(|| Error::Input(format!("index {index} out of range")))?;
        let mut cache = self.cache.lock().expect("tile cache poisoned");
        if cache.as_ref().map(|(p, _)| *p) != Some(pair) {
            let p = load_pair(&self.root, &self.ids[pair])?;
            *cache = Some((pair, tile_pair(&p, self.tile)?));
        }
        Ok(cache.as_ref().expect("filled above").1[tile].clone())
    }
}

/// Stacked model inputs: `t1`, `t2` are `[B, 3, H, W]`, `label` is `[B, H, W]` in {0, 1}.
pub struct Batch {
    pub ids: Vec<String>,
    pub t1: Tensor,
    pub t2: Tensor,
    pub label: Tensor,
    pub masks: Vec<Vec<u8>>,
}

pub fn make_batch(pairs: &[ImagePair], norm: &Normalization, dtype: DType) -> Result<Batch> {
    let first = pairs.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if pairs.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(Error::Shape("batch members differ in size".into()));
    }
    let b = pairs.len();
    let dev = crate::device();
    let mut t1 = Vec::with_capacity(b * 3 * h * w);
    let mut t2 = Vec::with_capacity(b * 3 * h * w);
    let mut label = Vec::with_capacity(b * h * w);
    for p in pairs {
        t1.extend(norm.planar(&p.t1, h, w));
        t2.extend(norm.planar(&p.t2, h, w));
        label.extend(p.label.iter().map(|&v| v as f32));
    }
    Ok(Batch {
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
        t1: Tensor::from_vec(t1, (b, 3, h, w), &dev)?.to_dtype(dtype)?,
        t2: Tensor::from_vec(t2, (b, 3, h, w), &dev)?.to_dtype(dtype)?,
        label: Tensor::from_vec(label, (b, h, w), &dev)?.to_dtype(dtype)?,
        masks: pairs.iter().map(|p| p.label.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, write_pair};

    fn dataset(n: usize) -> (tempfile::TempDir, Vec<ImagePair>) {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic::synthetic_pairs(n, 32, 4);
        for p in &pairs {
            write_pair(dir.path(), p).unwrap();
        }
        (dir, pairs)
    }

    #[test]
    fn loads_in_manifest_order() {
        let (dir, pairs) = dataset(3);
        let ids = vec![pairs[2].id.clone(), pairs[0].id.clone(), pairs[1].id.clone()];
        let m = SplitManifest::new(Split::Train, ids.clone(), 32).unwrap();
        let got: Vec<_> = load_split(dir.path(), &m).collect::<Result<_>>().unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got.iter().map(|p| p.id.clone()).collect::<Vec<_>>(), ids);
        assert_eq!(got[1], pairs[0]);
    }

    #[test]
    fn missing_label_is_named() {
        let (dir, pairs) = dataset(2);
        let gone = dir.path().join("label").join(format!("{}.png", pairs[1].id));
        std::fs::remove_file(&gone).unwrap();
        let m = SplitManifest::new(Split::Test, pairs.iter().map(|p| p.id.clone()).collect(), 32).unwrap();
        let err = load_split(dir.path(), &m).collect::<Result<Vec<_>>>().unwrap_err();
        match err {
            Error::Ingestion { path, .. } => assert_eq!(path, gone),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn size_mismatch_within_pair() {
        let (dir, pairs) = dataset(1);
        let p = &pairs[0];
        crate::data::write_rgb(&dir.path().join("B").join(format!("{}.png", p.id)), 16, 32, &vec![0; 16 * 32 * 3]).unwrap();
        assert!(matches!(load_pair(dir.path(), &p.id), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(SplitManifest::new(Split::Train, vec!["a".into(), "a".into()], 256).is_err());
    }

    #[test]
    fn manifest_round_trip_and_carve() {
        let (dir, pairs) = dataset(20);
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        SplitManifest::new(Split::Train, ids.clone(), 32).unwrap().write(dir.path()).unwrap();
        let train = resolve_manifest(dir.path(), Split::Train, 32, 7).unwrap();
        let val = resolve_manifest(dir.path(), Split::Val, 32, 7).unwrap();
        assert_eq!(val.len(), 2);
        assert_eq!(train.len(), 18);
        assert!(val.pair_ids.iter().all(|v| !train.pair_ids.contains(v)));
        assert_eq!(resolve_manifest(dir.path(), Split::Val, 32, 7).unwrap(), val);
    }

    #[test]
    fn carve_matches_whu_split() {
        // 5040 training tiles -> 4536 train / 504 val
        let ids: Vec<String> = (0..5040).map(|i| format!("t{i}")).collect();
        let (t, v) = carve_validation(&ids, 0, 0.1);
        assert_eq!((t.len(), v.len()), (4536, 504));
    }

    #[test]
    fn tiled_directory_indexes_tiles() {
        let (dir, pairs) = dataset(2);
        let m = SplitManifest::new(Split::Train, pairs.iter().map(|p| p.id.clone()).collect(), 16).unwrap();
        let src = TiledDirectory::open(dir.path(), &m).unwrap();
        assert_eq!(src.len(), 8);
        let t = src.get(5).unwrap();
        assert_eq!(t, tile_pair(&pairs[1], 16).unwrap()[1]);
    }

    #[test]
    fn normalization_constants() {
        let n = Normalization::default();
        let v = n.planar(&[255, 0, 124], 1, 1);
        assert!((v[0] - (1.0 - 0.485) / 0.229).abs() < 1e-6);
        assert!((v[1] - (-0.456 / 0.224)).abs() < 1e-6);
    }
}
