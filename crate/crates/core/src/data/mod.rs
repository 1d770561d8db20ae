//! Synthetic multimodal scenes, simulated pseudo depth and depth-map files.

mod dataset;
mod depth_io;
mod perturb;
mod scene;

pub use dataset::{
    build_dataset, derive_seed, load_dataset, make_sample, split_seeds, Dataset, Manifest,
    ManifestEntry, SegSample, Split, MANIFEST_NAME,
};
pub use depth_io::{
    parse_pfm, parse_pgm16, pfm_bytes, pgm16_bytes, read_label_pgm, read_pfm, read_pgm16,
    write_label_pgm, write_pfm, write_pgm16, write_pgm16_scaled,
};
pub use perturb::{min_max_normalize, perturb_depth, segment_surfaces, PerturbOutput, PerturbProfile};
pub use scene::{
    background_depth, class_color, gen_scene, layer_depth, render, sample_objects, Scene,
    SceneConfig, SceneObject, Shape,
};
