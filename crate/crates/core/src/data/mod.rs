//! Synthetic samples, augmentation, tokenization and dataset files.

mod augment;
mod charset;
pub mod font;
mod io;
mod sample;
mod synth;

pub use augment::{augment, crop_keeping_text, resize_for_inference, rotate, target_size};
pub use charset::Charset;
pub use io::{
    image_name, load_image, read_annotations, read_dataset, save_png, to_rgb8, write_dataset, AnnotationInstance,
    AnnotationRecord, ANNOTATIONS_FILE,
};
pub use sample::{image_tensor, SpottingSample, TextInstance};
pub use synth::{generate_dataset, generate_sample, render_sample, sample_rng, Rendered};
