#![allow(dead_code)]

use std::path::{Path, PathBuf};

use geoxplain::classifier::{predict_top1, ToyCnn};
use geoxplain::config::RunConfig;
use geoxplain::ingest::{self, Split};
use geoxplain::pipeline::{self, Overrides, Run};
use geoxplain::synthetic::{self, SyntheticConfig};

/// A synthetic dataset plus a config file next to it.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: RunConfig,
}

impl Workspace {
    /// Writes a planted-cue dataset with `eval_per_class` eval images per
    /// class and a config tuned for it.
    pub fn new(train_per_class: usize, eval_per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let synth = SyntheticConfig {
            train_per_class,
            eval_per_class,
            ..Default::default()
        };
        synthetic::write_dataset(&dir.path().join("data"), &synth).unwrap();
        let mut config = RunConfig::default();
        config.ingest.preprocess.side = synth.side as usize;
        config.classifier.train.learning_rate = 3e-3;
        config.classifier.train.max_epochs = 30;
        let ws = Self { dir, config };
        ws.save();
        ws
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config_path(&self) -> PathBuf {
        self.path().join("config.toml")
    }

    pub fn save(&self) {
        std::fs::write(self.config_path(), self.config.to_toml()).unwrap();
    }

    pub fn run(&self) -> Run {
        self.run_with(&Overrides::default())
    }

    pub fn run_with(&self, overrides: &Overrides) -> Run {
        Run::new(self.config.clone(), self.path().to_path_buf(), overrides)
    }

    /// Uses fixed stub logits and a stub map, so nothing needs training.
    pub fn use_stubs(&mut self) {
        self.config.classifier.backend = geoxplain::classifier::BackendKind::Stub;
        self.config.classifier.stub_logits = vec![0.0, 1.0, 0.0];
        self.config.attribution.methods = vec!["stub".into()];
        self.save();
    }

    /// Top-1 accuracy of the trained toy model on the eval split.
    pub fn eval_accuracy(&self) -> f64 {
        let model = ToyCnn::load(&self.path().join(&self.config.classifier.weights)).unwrap();
        let manifest_path = self.path().join(&self.config.run.manifest);
        let manifest = ingest::load_manifest(&manifest_path).unwrap();
        let records: Vec<_> = manifest.split(Split::Eval).collect();
        let correct = records
            .iter()
            .filter(|r| {
                let img = ingest::load_image(&ingest::resolve_uri(&manifest_path, &r.uri)).unwrap();
                let x = ingest::preprocess(&img, &self.config.ingest.preprocess).unwrap();
                predict_top1(&model, &x).unwrap().0 == r.label
            })
            .count();
        correct as f64 / records.len() as f64
    }

    pub fn train(&self) -> f64 {
        pipeline::cmd_train(&self.run()).unwrap();
        self.eval_accuracy()
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_geoxplain")
}

pub fn geoxplain(args: &[&str], cache: &Path) -> std::process::Output {
    std::process::Command::new(bin())
        .args(args)
        .env("GEOXPLAIN_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}
