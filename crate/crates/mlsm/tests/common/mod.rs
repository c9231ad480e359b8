#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mlsm::config::RunConfig;
use mlsm::toy::{self, ToySpec};

/// A generated toy set plus a configuration pointing into `dir`.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: RunConfig,
}

impl Fixture {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

pub fn toy_config(root: &Path, image_size: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.root = root.join("data");
    c.data.index = root.join("runs/index");
    c.data.crops = root.join("runs/crops");
    c.data.image_size = image_size;
    c.localizer.checkpoint = root.join("runs/localizer/localizer.ckpt");
    c.localizer.steps = 30;
    c.localizer.batch_size = 16;
    c.train.n_query = 10;
    c.train.max_episodes = 6;
    c.train.eval_interval = 3;
    c.train.val_episodes = 4;
    c.train.n_query_val = 10;
    c.model.fused_dim = 16;
    c.eval.checkpoint = root.join("runs/train/best.ckpt");
    c.eval.episodes = 5;
    c.eval.n_query = 25;
    c.run.deterministic = true;
    c
}

/// 20 classes of `per_class` toy images, indexed and normalized.
pub fn toy_fixture(per_class: usize, image_size: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), image_size);
    let spec = ToySpec { classes: 20, per_class, size: 24, seed: 0 };
    toy::generate(&config.data.root, &spec, false).unwrap();
    mlsm::pipeline::prepare(&config, false).unwrap();
    Fixture { dir, config }
}

pub fn write_png(path: &Path, img: &image::RgbImage) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}
