//! Tiny on-disk corpus shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use ast_sed::datagen::{build_dataset, DatasetManifest, Split, SplitSizes};
use ast_sed::dataset::Corpus;
use ast_sed::features::FrontendConfig;

pub fn tiny_sizes() -> SplitSizes {
    SplitSizes { strong_real: 4, strong_synth: 4, weak: 8, unlabeled: 8, validation: 4, test: 4 }
}

pub fn tiny_manifest(seed: u64) -> DatasetManifest {
    DatasetManifest { seed, sizes: tiny_sizes(), ..DatasetManifest::default() }
}

pub fn tiny_corpus(dir: &Path) -> Corpus {
    build_dataset(&tiny_manifest(0), dir).unwrap();
    Corpus::load(dir, &FrontendConfig::default(), &Split::ALL).unwrap()
}
