//! On-disk datasets: PNG rasters plus a JSON manifest.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! train/scene_0000/image.png
//! train/scene_0000/obj00_{sv,si,sf,appearance}.png
//! test/scene_0000/...
//! ```
//!
//! All manifest paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_masks_with_tolerance, generate_scene, Background, LayeredScene, Sample, SceneConfig,
    Sprite,
};
use crate::error::{Error, Result};
use crate::maskops::BBox;
use crate::rasterio;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Train scene `i` is generated from seed `train_seed + i`.
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_scenes: 20,
            test_scenes: 8,
            train_seed: 1_000,
            test_seed: 9_000_000,
        }
    }
}

impl DatasetConfig {
    pub fn seeds(&self, split: Split) -> std::ops::Range<u64> {
        let (base, n) = match split {
            Split::Train => (self.train_seed, self.train_scenes),
            Split::Test => (self.test_seed, self.test_scenes),
        };
        base..base + n as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let train = self.seeds(Split::Train);
        let test = self.seeds(Split::Test);
        let lo = train.start.max(test.start);
        if lo < train.end.min(test.end) {
            return Err(Error::SeedCollision(lo));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub split: Split,
    pub seed: u64,
    pub image: String,
    pub background: Background,
    pub sprites: Vec<Sprite>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: Split,
    /// Index into [`DatasetManifest::scenes`].
    pub scene: usize,
    pub object_id: usize,
    pub depth_rank: usize,
    pub image: String,
    pub appearance: String,
    pub sv: String,
    pub si: String,
    pub sf: String,
    pub bbox: BBox,
    pub occluders: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub canvas: [usize; 2],
    pub config: DatasetConfig,
    pub scenes: Vec<SceneRecord>,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                msg: format!(
                    "manifest version {} (expected {MANIFEST_VERSION})",
                    m.version
                ),
            });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Accepts either the manifest file or the directory holding it.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn scene_indices(&self, split: Split) -> Vec<usize> {
        (0..self.scenes.len())
            .filter(|&i| self.scenes[i].split == split)
            .collect()
    }

    /// Samples of one scene, in object order.
    pub fn samples_of_scene(&self, scene: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].scene == scene)
            .collect()
    }

    /// Rebuilds a scene from its recorded seed and the generation config.
    pub fn regenerate_scene(&self, scene: usize) -> Result<LayeredScene> {
        let rec = self.scenes.get(scene).ok_or(Error::IndexOutOfRange {
            index: scene,
            len: self.scenes.len(),
        })?;
        generate_scene(&self.config.scene, &mut ChaCha8Rng::seed_from_u64(rec.seed))
    }
}

/// Generates both splits under `out_dir` and writes the manifest last.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        canvas: cfg.scene.canvas,
        config: cfg.clone(),
        scenes: Vec::new(),
        samples: Vec::new(),
        root: out_dir.to_path_buf(),
    };
    for split in [Split::Train, Split::Test] {
        for (i, seed) in cfg.seeds(split).enumerate() {
            let scene = generate_scene(&cfg.scene, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let dir = format!("{}/scene_{i:04}", split.as_str());
            let image = format!("{dir}/image.png");
            rasterio::save_rgb(&out_dir.join(&image), &scene.render())?;
            let scene_index = manifest.scenes.len();
            for s in derive_masks_with_tolerance(&scene, cfg.scene.equality_tolerance) {
                let stem = format!("{dir}/obj{:02}", s.object_id);
                let rec = SampleRecord {
                    split,
                    scene: scene_index,
                    object_id: s.object_id,
                    depth_rank: s.depth_rank,
                    image: image.clone(),
                    appearance: format!("{stem}_appearance.png"),
                    sv: format!("{stem}_sv.png"),
                    si: format!("{stem}_si.png"),
                    sf: format!("{stem}_sf.png"),
                    bbox: s.bbox,
                    occluders: s.occluders.clone(),
                };
                rasterio::save_rgb(&out_dir.join(&rec.appearance), &s.appearance)?;
                rasterio::save_mask(&out_dir.join(&rec.sv), &s.sv)?;
                rasterio::save_mask(&out_dir.join(&rec.si), &s.si)?;
                rasterio::save_mask(&out_dir.join(&rec.sf), &s.sf)?;
                manifest.samples.push(rec);
            }
            manifest.scenes.push(SceneRecord {
                split,
                seed,
                image,
                background: scene.background,
                sprites: scene.sprites,
            });
        }
    }
    manifest.save()?;
    Ok(manifest)
}

/// Decodes sample `index` and re-checks its mask invariants.
pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<Sample> {
    let rec = manifest.samples.get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: manifest.samples.len(),
    })?;
    let image = rasterio::load_rgb(&manifest.resolve(&rec.image))?;
    let appearance = rasterio::load_rgb(&manifest.resolve(&rec.appearance))?;
    let sv_path = manifest.resolve(&rec.sv);
    let sv = rasterio::load_mask(&sv_path)?;
    let si = rasterio::load_mask(&manifest.resolve(&rec.si))?;
    let sf_path = manifest.resolve(&rec.sf);
    let sf = rasterio::load_mask(&sf_path)?;
    let canvas = (manifest.canvas[0], manifest.canvas[1]);
    for (path, dims) in [
        (&rec.image, image.dims()),
        (&rec.appearance, appearance.dims()),
        (&rec.sv, sv.dims()),
        (&rec.si, si.dims()),
        (&rec.sf, sf.dims()),
    ] {
        if dims != canvas {
            return Err(Error::Corrupt {
                path: manifest.resolve(path),
                msg: format!("raster is {dims:?}, canvas is {canvas:?}"),
            });
        }
    }
    if sf.bbox() != Some(rec.bbox) {
        return Err(Error::Invariant {
            path: sf_path,
            msg: format!(
                "bbox {:?} does not match the recorded {:?}",
                sf.bbox(),
                rec.bbox
            ),
        });
    }
    let sample = Sample {
        image,
        appearance,
        object_id: rec.object_id,
        depth_rank: rec.depth_rank,
        sv,
        si,
        sf,
        bbox: rec.bbox,
        occluders: rec.occluders.clone(),
    };
    sample
        .check_invariants()
        .map_err(|msg| Error::Invariant { path: sv_path, msg })?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(train: usize, test: usize) -> DatasetConfig {
        DatasetConfig {
            train_scenes: train,
            test_scenes: test,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn build_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(3, 2);
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.scenes.len(), 5);
        assert!(!m.is_empty());
        let reloaded = DatasetManifest::open(dir.path()).unwrap();
        assert_eq!(reloaded.samples, m.samples);
        for scene in 0..m.scenes.len() {
            let regenerated = m.regenerate_scene(scene).unwrap();
            assert_eq!(regenerated.sprites, m.scenes[scene].sprites);
            let derived = crate::scenegen::derive_masks(&regenerated);
            for (k, idx) in m.samples_of_scene(scene).into_iter().enumerate() {
                let loaded = load_sample(&reloaded, idx).unwrap();
                assert_eq!(loaded, derived[k]);
            }
        }
    }

    #[test]
    fn empty_config_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_cfg(0, 0), dir.path()).unwrap();
        assert!(m.is_empty() && m.scenes.is_empty());
        assert!(dir.path().join(MANIFEST_FILE).exists());
        assert!(matches!(
            load_sample(&m, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn overlapping_seed_ranges_are_rejected() {
        let cfg = DatasetConfig {
            train_seed: 10,
            train_scenes: 5,
            test_seed: 14,
            test_scenes: 3,
            ..DatasetConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(&cfg, dir.path()),
            Err(Error::SeedCollision(14))
        ));
    }

    #[test]
    fn tampered_visible_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_cfg(2, 0), dir.path()).unwrap();
        let rec = &m.samples[0];
        let sf = rasterio::load_mask(&m.resolve(&rec.sf)).unwrap();
        // Claim a pixel outside the silhouette as visible.
        let outside = sf.bits().position(|b| !b).unwrap();
        let mut sv = rasterio::load_mask(&m.resolve(&rec.sv)).unwrap();
        sv.set(outside % sf.width(), outside / sf.width(), 1.0);
        rasterio::save_mask(&m.resolve(&rec.sv), &sv).unwrap();
        match load_sample(&m, 0) {
            Err(Error::Invariant { path, .. }) => assert!(path.ends_with(&rec.sv)),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_cfg(1, 0), dir.path()).unwrap();
        std::fs::remove_file(m.resolve(&m.samples[0].si)).unwrap();
        let err = load_sample(&m, 0).unwrap_err().to_string();
        assert!(err.contains("_si.png"), "{err}");
    }
}
