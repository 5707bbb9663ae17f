#![allow(dead_code)]

use std::path::Path;

use vbiopsy_service::config::MaskSource;
use vbiopsy_service::workspace::Workspace;
use vbiopsy_service::{commands, PipelineConfig};

/// Small cohort, few epochs, reference masks: the whole pipeline in seconds.
pub fn tiny_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk(root);
    cfg.data.cohort.n = 24;
    cfg.data.cohort.seed = 11;
    cfg.models.mask_source = MaskSource::Reference;
    cfg.models.segmenter.epochs = 2;
    for m in &mut cfg.models.ensemble {
        m.epochs = 2;
    }
    cfg.models.vaegan.epochs = 2;
    cfg
}

pub fn prepare(cfg: &PipelineConfig) -> Workspace {
    let ws = Workspace::open(cfg.clone()).unwrap();
    commands::phantom_gen(&ws).unwrap();
    commands::preprocess(&ws).unwrap();
    ws
}

/// Dataset through VAE-GAN; segmenters are skipped because masks come from the reference.
pub fn full_pipeline(cfg: &PipelineConfig) -> Workspace {
    let ws = prepare(cfg);
    commands::train_clf(&ws).unwrap();
    commands::train_vae(&ws).unwrap();
    ws
}
