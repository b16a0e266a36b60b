//! Synthetic morphological digit bags and IDX image files.

mod bags;
mod dataset;
mod idx;
mod image;
mod perturb;
mod stroke;

pub use bags::{aux_label, build_bag, build_bag_with_label, instance_class, BagSpec, LabelScheme};
pub use dataset::{
    bag_id, bag_rng, generate_split, load_manifest, read_bags, write_bags, Dataset,
    DatasetManifest, Split, SplitCounts, ARCHIVE_MAGIC, ARCHIVE_VERSION, DATASET_FORMAT_VERSION,
    GENERATOR_VERSION, MANIFEST_FILE,
};
pub use idx::{
    load_idx, read_idx_images, read_idx_labels, save_idx, write_idx_images, write_idx_labels,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use image::{count_components, DigitImage, DIGIT_SIZE, FOREGROUND_THRESHOLD};
pub use perturb::{perturb, PerturbClass, INACTIVE_RETRIES};
pub use stroke::{footprint, gen_stroke_digit, gen_stroke_digit_with_thickness};
