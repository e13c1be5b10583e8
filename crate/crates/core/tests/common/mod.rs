#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::PathBuf;

use patch_core::lm::{pretrain, Corpus, PretrainConfig, ToyLm};

pub fn fixture_corpus() -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/sonnets.txt");
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// The default toy model pretrained on the fixture corpus.
///
/// Pretraining is deterministic, so the checkpoint is cached under the
/// cargo test scratch directory and shared between test binaries.
pub fn pretrained() -> (ToyLm, Corpus) {
    let bytes = fixture_corpus();
    let cfg = PretrainConfig::default();
    let mut h = DefaultHasher::new();
    serde_json::to_string(&cfg).unwrap().hash(&mut h);
    bytes.hash(&mut h);
    env!("CARGO_PKG_VERSION").hash(&mut h);
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-{:016x}.ckpt", h.finish()));
    let model = match std::fs::read(&path).ok().and_then(|b| ToyLm::from_bytes(&b).ok()) {
        Some(m) => m,
        None => {
            let (m, _) = pretrain(&bytes, &cfg).unwrap();
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            std::fs::write(&tmp, m.to_bytes().unwrap()).unwrap();
            std::fs::rename(&tmp, &path).unwrap();
            m
        }
    };
    let corpus = model.corpus(&bytes, cfg.val_fraction).unwrap();
    (model, corpus)
}
