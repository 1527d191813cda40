#![allow(dead_code)]

use ghnforge::archgraph::{sample_space, ArchGraph, ArchSpaceConfig};
use ghnforge::data::{Dataset, SynthConfig};
use ghnforge::ghn::GhnConfig;

pub fn small_space(n: usize, seed: u64) -> Vec<ArchGraph> {
    sample_space(&ArchSpaceConfig {
        n_archs: n,
        depth: [1, 2],
        channels: [4, 8],
        kernels: vec![1, 3],
        image_size: 8,
        seed,
        ..ArchSpaceConfig::default()
    })
    .unwrap()
}

pub fn small_data() -> Dataset {
    Dataset::synthetic(&SynthConfig {
        n_train: 256,
        n_val: 64,
        size: 8,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn small_ghn(seed: u64) -> GhnConfig {
    GhnConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        decoder_spatial: 3,
        seed,
        ..GhnConfig::default()
    }
}
